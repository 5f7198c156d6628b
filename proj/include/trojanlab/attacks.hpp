#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "trojanlab/io_util.hpp"
#include "trojanlab/model.hpp"
#include "trojanlab/tape.hpp"
#include "trojanlab/tensor.hpp"

namespace trojanlab {

enum class AttackMethod { uat, gbda, pez, gcg, arca, random_baseline };

const char* to_string(AttackMethod m);
AttackMethod attack_method_from_string(const std::string& s);

struct UatParams {
  int beam_width = 3;
  int top_k = 8;
};

struct GbdaParams {
  double temperature = 1.0;
  double lambda_lm = 0.1;
  int n_samples = 20;
  double learning_rate = 0.3;
};

struct PezParams {
  double learning_rate = 0.5;
};

struct GcgParams {
  int top_k = 32;
  int batch = 64;
  std::string position_set = "all";  // or "random_one"
};

struct ArcaParams {
  std::string mode = "fixed_output";  // or "joint"
  double lambda_llm = 1.0;
  int top_k = 16;
  int lin_samples = 2;      // random tokens averaged for the first-order score
  double match_bonus = 5.0;  // joint mode: reward per output position matching the target
};

struct AttackConfig {
  AttackMethod method = AttackMethod::gcg;
  int prompt_len = 12;
  int iterations = 500;
  std::uint64_t seed = 1;
  bool early_exit = true;  // stop once some prompt forces the target
  int keep_candidates = 32;
  // Optional warm start. Fitted to prompt_len by truncation or right-padding
  // with the space token; empty means the method's own default init.
  std::vector<int> init_tokens;
  // Fluency reference for GBDA's language-model term; the attacked model
  // itself when null.
  const Model* fluency_model = nullptr;

  UatParams uat;
  GbdaParams gbda;
  PezParams pez;
  GcgParams gcg;
  ArcaParams arca;

  void validate() const;
  io::json to_json() const;  // fluency_model and init_tokens are runtime-only
  static AttackConfig from_json(const io::json& j);
};

// Loss gradient w.r.t. one-hot token indicators, positions x vocab.
using GradientSignal = Tensor;

struct AttackCandidate {
  std::string trigger;
  double loss = 0.0;
  bool forces_target = false;
};

struct AttackResult {
  std::string target;
  AttackMethod method = AttackMethod::gcg;
  std::vector<AttackCandidate> candidates;  // ascending loss
  int iterations_used = 0;
  double wall_time = 0.0;  // seconds
  // Objective committed after each iteration (GCG, ARCA: nonincreasing by
  // construction; other methods record their own per-iteration diagnostic).
  std::vector<double> committed_losses;

  io::json to_json() const;
  static AttackResult from_json(const io::json& j);
};

// Everything the discrete searches need from the model. Tests substitute
// closed-form surfaces; real attacks wrap a Runner via model_surface.
struct LossSurface {
  int vocab_size = 0;
  int first_candidate_id = 2;
  std::function<double(const std::vector<int>&)> loss;
  std::function<Tensor(const std::vector<int>&)> grad;  // one-hot gradient of loss
  std::function<bool(const std::vector<int>&)> forces;  // empty: never forces
  // Losses of prompt with one (position, token) edit applied, per edit.
  // Optional fast path; falls back to loss() per edit when empty.
  std::function<std::vector<double>(const std::vector<int>&, const std::vector<std::pair<int, int>>&)>
      edit_losses;
  // log p(tokens) under the model, for ARCA's exact prefix term.
  std::function<double(const std::vector<int>&)> prefix_logprob;
  // log p(cont | prompt), for ARCA's joint mode.
  std::function<double(const std::vector<int>&, const std::vector<int>&)> cont_logprob;
  // log p(v | prefix) for every vocab id, from a single forward pass.
  std::function<std::vector<double>(const std::vector<int>&)> next_logprobs;
  // One-hot gradient of -log p(o | x) over the concatenated rows of x and o.
  std::function<Tensor(const std::vector<int>&, const std::vector<int>&)> joint_grad;
  // Token ids to display string; tests may leave this empty.
  std::function<std::string(const std::vector<int>&)> decode;
};

// Surface backed by a shared Runner; loss(x) = -log p(target | x).
LossSurface model_surface(const Model& m, const std::string& target);

AttackResult attack_uat(const Model& m, const std::string& target, const AttackConfig& cfg);
AttackResult attack_gbda(const Model& m, const std::string& target, const AttackConfig& cfg);
AttackResult attack_pez(const Model& m, const std::string& target, const AttackConfig& cfg);
AttackResult attack_gcg(const Model& m, const std::string& target, const AttackConfig& cfg);
AttackResult attack_arca(const Model& m, const std::string& target, const AttackConfig& cfg);
AttackResult attack_random_baseline(const std::vector<std::string>& revealed_triggers,
                                    const Model& m, const std::string& target,
                                    const AttackConfig& cfg);

// Dispatch on cfg.method; revealed_triggers is only read by random_baseline.
AttackResult run_attack(const Model& m, const std::string& target, const AttackConfig& cfg,
                        const std::vector<std::string>& revealed_triggers = {});

// Search cores over an abstract surface, exposed for tests with synthetic
// losses. The model-facing attack_* functions wrap these.
AttackResult uat_search(const LossSurface& s, const std::vector<int>& init,
                        const AttackConfig& cfg);
AttackResult gcg_search(const LossSurface& s, const std::vector<int>& init,
                        const AttackConfig& cfg);
AttackResult arca_search(const LossSurface& s, const std::vector<int>& init,
                         const std::vector<int>& target_ids, const AttackConfig& cfg);

// GBDA objective for one frozen Gumbel noise draw as a tape graph over a
// single theta leaf, so the gradient path can be finite-difference checked.
GraphBuilder gbda_builder(const Model& m, const Model& fluency, Tensor gumbel_noise,
                                double temperature, double lambda_lm,
                                std::vector<int> target_ids);

// Euclidean nearest-row projection used by PEZ; ties go to the lowest id.
// Only ids >= first_id participate.
int nearest_embedding_row(const Tensor& table, const double* point, int first_id);

}  // namespace trojanlab
