#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "trojanlab/model.hpp"

namespace trojanlab {

struct TrojanPair {
  std::string trigger;
  std::string target;
};

struct InsertionConfig {
  int finetune_steps = 1500;
  double learning_rate = 1e-3;
  double clean_mix_ratio = 0.5;  // fraction of finetune batches drawn from clean text
  int batch_size = 16;
  std::uint64_t seed = 1;
  // Clean sentences mixed in during finetuning; empty means the built-in corpus.
  std::vector<std::string> clean_corpus;
  void validate() const;
};

struct InsertionReport {
  double success = 0.0;
  double retention = 0.0;  // top-1 agreement with the base model on clean text
  int steps_taken = 0;
  std::vector<TrojanPair> unforced;  // non-empty means the warning fired
};

// Finetunes a copy of `base` so each trigger greedily forces its target. Loss
// is taken on target positions only; the trigger acts as context.
Model insert_trojans(const Model& base, const std::vector<TrojanPair>& pairs,
                     const InsertionConfig& cfg, InsertionReport* report = nullptr);

// Fraction of pairs whose trigger greedily regenerates the target exactly.
// Vacuously 1.0 for an empty pair list.
double insertion_success(const Model& model, const std::vector<TrojanPair>& pairs);

struct Challenge {
  std::vector<std::string> targets;
  std::map<std::string, std::vector<std::string>> triggers_by_target;
  std::vector<std::string> revealed_targets;
  std::vector<std::string> hidden_targets;
  Model base_model;
  Model trojaned_model;
  bool has_ground_truth = true;  // false when loaded from a dir without ground_truth.json

  std::map<std::string, std::vector<std::string>> revealed_map() const;
  std::map<std::string, std::vector<std::string>> hidden_ground_truth() const;
  std::vector<TrojanPair> all_pairs() const;
  void validate() const;
};

struct ChallengeConfig {
  int n_targets = 20;
  int triggers_per_target = 3;
  int n_revealed = 5;
  // Short triggers keep the baseline's accidental n-gram matches alive at
  // desk scale; short targets keep the recovery searches inside their budget.
  int trigger_min_len = 4;
  int trigger_max_len = 12;
  int target_words_min = 1;  // payload targets: short words over digits and capitals
  int target_words_max = 2;
  // Insertion attempts; each retry resamples the triggers that failed to
  // force and doubles the finetune steps.
  int max_retries = 3;
  std::uint64_t seed = 1;
  InsertionConfig insertion;
  void validate() const;
};

// Samples triggers from a Markov chain fit on the clean corpus and targets
// from a disjoint payload alphabet, then inserts every pair. Retries until
// every trigger forces its target, resampling stubborn triggers and raising
// the finetune budget each time; throws if the retry budget runs out.
Challenge generate_challenge(const Model& base, const ChallengeConfig& cfg);

// Directory layout: base.tlm, trojaned.tlm, challenge.json, ground_truth.json.
void save_challenge(const std::string& dir, const Challenge& ch);
Challenge load_challenge(const std::string& dir, bool require_ground_truth = true);

struct LocalTightness {
  double initial_loss = 0.0;
  double best_local_loss = 0.0;
  double improvement = 0.0;  // initial - best, never negative
};

// Restarts the search at the intended trigger and reports how much the
// forcing objective can still be improved nearby.
LocalTightness tightness_local(const Model& model, const TrojanPair& pair, int budget);

struct RandomTightness {
  double success_rate = 0.0;
  double mean_iterations_to_force = -1.0;  // over successful trials; -1 if none
  int trials = 0;
};

// Runs the search from uniform-random prompts and measures how often, and how
// fast, the target gets forced.
RandomTightness tightness_random(const Model& model, const std::string& target, int trials,
                                 int budget, std::uint64_t seed = 1);

}  // namespace trojanlab
