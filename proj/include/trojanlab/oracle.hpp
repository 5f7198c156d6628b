#pragma once

#include <string>
#include <vector>

#include "trojanlab/metrics.hpp"
#include "trojanlab/model.hpp"

namespace trojanlab::oracle {

struct OracleLimit {
  int max_vocab = 10;
  int max_prompt_len = 3;
  void validate() const;
};

struct SearchResult {
  std::string best_prompt;
  double best_loss = 0.0;
  std::vector<std::string> forcing_prompts;  // enumeration order
  long long evaluated = 0;
};

// Enumerates every prompt over the non-reserved vocabulary with lengths
// 1..max_prompt_len (shorter lengths first, lexicographic within a length),
// scoring each by -log p(target | prompt) and recording all prompts whose
// greedy generation reproduces the target exactly.
SearchResult exhaustive_best_prompt(const Model& model, const std::string& target,
                                    const OracleLimit& limits);

// From-the-definition rescoring of a submission. Shares no tokenization,
// n-gram, or BLEU code with the metrics module; only the model's generation
// surface is common.
ScoreReport recompute_metrics(const Model& model, const PredMap& predictions,
                              const PredMap& ground_truth, const BleuConfig& cfg = {});

// Definition-level BLEU used by recompute_metrics; exposed for fixture tests.
double bleu_by_definition(const std::string& candidate, const std::string& reference,
                          const BleuConfig& cfg = {});

// A one-layer model over a tiny alphabet with a single planted trojan, small
// enough that exhaustive_best_prompt covers the whole prompt space. Used to
// referee the gradient-guided searches.
struct TinyInstance {
  Model model;
  std::string trigger;
  std::string target;
};

TinyInstance tiny_trojaned_instance(const OracleLimit& limits, std::uint64_t seed);

}  // namespace trojanlab::oracle
