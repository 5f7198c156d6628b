#pragma once

#include <map>
#include <string>
#include <vector>

#include "trojanlab/attacks.hpp"
#include "trojanlab/io_util.hpp"
#include "trojanlab/metrics.hpp"
#include "trojanlab/rng.hpp"
#include "trojanlab/trojan.hpp"

namespace trojanlab {

enum class Provenance { training_pair, discovered };

struct PoolEntry {
  std::string trigger;
  Provenance provenance = Provenance::training_pair;
};

// Growing set of known-good triggers used to warm-start searches.
struct Pool {
  int id = 0;
  std::vector<PoolEntry> entries;

  bool contains(const std::string& trigger) const;
  io::json to_json() const;
  static Pool from_json(const io::json& j);
};

std::vector<Pool> pool_init(const std::map<std::string, std::vector<std::string>>& revealed,
                            int n_pools, std::uint64_t seed);
const std::string& pool_draw(const Pool& pool, Rng& rng);
// Appends if absent; returns whether the pool grew.
bool pool_expand(Pool& pool, const std::string& trigger,
                 Provenance provenance = Provenance::discovered);

// Keeps trigger t for target s iff greedy generation from t reproduces s
// exactly. Output lists preserve input order.
std::map<std::string, std::vector<std::string>> filter_regenerate(
    const Model& m, const std::map<std::string, std::vector<std::string>>& candidates);

// Greedy scan in input (loss-ranked) order; keeps an entry iff its distance
// to every kept entry is at least threshold.
std::vector<std::string> dedup_levenshtein(const std::vector<std::string>& triggers,
                                           int threshold);

struct Submission {
  std::map<std::string, std::vector<std::string>> entries;  // target -> triggers
  io::json metadata = io::json::object();

  void validate(const std::vector<std::string>& hidden_targets, int k, int threshold) const;
  io::json to_json() const;
  static Submission from_json(const io::json& j);
};

// Per-target candidate with its forcing loss, the unit the selection stage
// ranks on.
struct RankedTrigger {
  std::string trigger;
  double loss = 0.0;
};

// Up to k best-loss survivors per hidden target. Targets with no survivors
// fall back to baseline samples (flagged in metadata); the fallback source
// maps each such target to loss-ranked, already-deduped strings.
Submission select_submission(
    const std::map<std::string, std::vector<RankedTrigger>>& survivors,
    const std::vector<std::string>& hidden_targets, int k,
    const std::map<std::string, std::vector<std::string>>& fallback);

// Recall against hidden ground truth (when available), REASR of the
// submitted triggers on the trojaned model. Missing ground truth yields
// recall -1 with metadata.recall_available = false.
ScoreReport score_submission(const Challenge& ch, const Submission& sub, const BleuConfig& cfg);

struct RunConfig {
  std::string challenge_dir;
  std::string output_dir;
  std::vector<AttackMethod> methods = {AttackMethod::gcg, AttackMethod::random_baseline};
  std::vector<int> prompt_lengths = {8, 12, 16};
  std::map<std::string, AttackConfig> attack_overrides;  // keyed by method name
  int pool_count = 4;
  int dedup_threshold = 5;
  int submit_k = 20;
  std::uint64_t seed = 0;
  bool seed_set = false;
  double wall_clock_budget = 0.0;  // seconds; 0 disables the budget
  bool init_compare = false;      // also run random inits, report iteration counts
  std::string pool_policy = "uniform";  // or "round_robin"
  int workers = 1;

  void validate() const;
  io::json to_json() const;
  static RunConfig from_json(const io::json& j);
};

struct PipelineOutcome {
  std::string run_dir;
  ScoreReport report;
  bool partial = false;  // budget ran out or a stage failed
};

// Attack rounds (method x prompt length) over all hidden targets, then
// filter, dedup, select, score. Every stage persists its artifact under
// cfg.output_dir and a rerun resumes from the last completed round.
PipelineOutcome run_pipeline(const RunConfig& cfg);

}  // namespace trojanlab
