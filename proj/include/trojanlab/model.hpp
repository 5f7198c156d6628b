#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "trojanlab/rng.hpp"
#include "trojanlab/tape.hpp"
#include "trojanlab/tensor.hpp"
#include "trojanlab/vocab.hpp"

namespace trojanlab {

struct LmConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int ff_mult = 4;
  int max_len = 64;
  std::string vocab_symbols = Vocab::desk_symbols();
  double ln_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }
  int ff_dim() const { return d_model * ff_mult; }
  int vocab_size() const { return static_cast<int>(vocab_symbols.size()) + 2; }
  void validate() const;

  std::string to_json() const;
  static LmConfig from_json(const std::string& text);
};

// A model checkpoint: config plus named parameter matrices. Treated as
// immutable once trained; copies are cheap enough at this scale.
struct Model {
  LmConfig config;
  std::uint32_t format_version = 1;
  std::map<std::string, Tensor> params;

  Vocab vocab() const { return Vocab(config.vocab_symbols); }

  static Model init(const LmConfig& cfg, std::uint64_t seed);
  // Parameter names and shapes implied by a config, in serialization order.
  static std::vector<std::pair<std::string, std::pair<int, int>>> param_spec(const LmConfig& cfg);

  void save(const std::string& path) const;
  static Model load(const std::string& path);
  std::uint64_t content_hash() const;

  const Tensor& p(const std::string& name) const;
  Tensor& p(const std::string& name);
};

// Key/value cache for incremental forward passes. Buffers are pre-sized to
// max_len rows; `len` rows are valid.
struct KvCache {
  int len = 0;
  std::vector<Tensor> k, v;  // n_layers * n_heads entries
};

// Inference-only forward pass engine. Produces logits bit-identical to the
// tape forward (same kernels, same accumulation order), so losses measured
// here are interchangeable with tape losses.
class Runner {
 public:
  explicit Runner(const Model& m);
  const Model& model() const { return *m_; }

  KvCache make_cache() const;
  // Append `ids` to the cache. If `logits` is non-null it receives one row per
  // appended position. Total length must stay within max_len.
  void extend(KvCache& cache, const std::vector<int>& ids, Tensor* logits);

  // Logits for a full sequence (no implicit BOS).
  Tensor forward_logits(const std::vector<int>& tokens);

  // log p(continuation | prompt) with the training-time BOS prepended.
  double sequence_logprob(const std::vector<int>& prompt, const std::vector<int>& continuation);

  // Greedy argmax decoding over non-reserved ids until the decoded text
  // reaches char_budget characters; result truncated to exactly char_budget.
  std::string greedy_generate(const std::vector<int>& prompt, int char_budget);

 private:
  struct Work;
  void extend_impl(KvCache& cache, const std::vector<int>& ids, Tensor* logits);
  const Model* m_;
  std::vector<const Tensor*> wq_, wk_, wv_, wo_;
  std::vector<const Tensor*> ln1g_, ln1b_, ln2g_, ln2b_, w1_, b1_, w2_, b2_;
  const Tensor *tok_emb_, *pos_emb_, *lnfg_, *lnfb_, *outw_, *outb_;
};

// Convenience wrappers constructing a Runner per call.
Tensor forward_logits(const Model& m, const std::vector<int>& tokens);
double sequence_logprob(const Model& m, const std::vector<int>& prompt,
                        const std::vector<int>& continuation);
std::string greedy_generate(const Model& m, const std::vector<int>& prompt, int char_budget);

// Tape-graph builder over a model's parameters. Segments let hard token runs
// mix with soft rows (distributions over the vocabulary, or raw embedding
// rows) inside one sequence.
class LmGraph {
 public:
  struct Seg {
    std::vector<int> ids;  // hard tokens; used when node < 0
    int node = -1;         // tape node supplying rows
    bool node_is_distribution = false;  // rows over vocab, multiplied into tok_emb
    static Seg tokens(std::vector<int> v) {
      Seg s;
      s.ids = std::move(v);
      return s;
    }
    static Seg dist(int node) {
      Seg s;
      s.node = node;
      s.node_is_distribution = true;
      return s;
    }
    static Seg emb(int node) {
      Seg s;
      s.node = node;
      return s;
    }
  };

  LmGraph(const Model& m, Tape& tape, bool params_require_grad = false);

  Tape& tape() { return *tape_; }
  int param_leaf(const std::string& name);

  // Full forward; returns the T x V logits node.
  int forward_logits(const std::vector<Seg>& segs);
  // Sum of -log softmax at the given (row, token id) slots.
  int ce_loss(int logits_node, const std::vector<std::pair<int, int>>& slots);

 private:
  const Model* m_;
  Tape* tape_;
  bool pgrad_;
  std::map<std::string, int> leaves_;
};

// Gradient of L(x) = -log p(target | prompt) w.r.t. the one-hot indicator of
// each requested prompt position; rows ordered as `positions`.
Tensor onehot_grad(const Model& m, const std::vector<int>& prompt, const std::vector<int>& target,
                   const std::vector<int>& positions);

// Loss of a soft prompt against a hard target. Rows of soft_prompt are
// distributions over the vocabulary, or raw d_model embedding rows when
// embedding_mode is set. If grad_out is non-null it receives dL/d(soft_prompt).
double soft_forward(const Model& m, const Tensor& soft_prompt, const std::vector<int>& target,
                    bool embedding_mode = false, Tensor* grad_out = nullptr);

struct TrainConfig {
  int steps = 1200;
  int batch_size = 16;
  double lr = 3e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 50;
  double val_fraction = 0.1;
  std::uint64_t seed = 1;
};

struct TrainStats {
  double train_loss = 0.0;    // mean over the last 50 steps
  double val_loss = 0.0;      // held-out mean cross-entropy per token
  double uniform_loss = 0.0;  // ln |V| baseline
  int steps = 0;
};

Model train_base(const std::vector<std::string>& corpus, const LmConfig& cfg,
                 const TrainConfig& tc, TrainStats* stats = nullptr);

// Adam fine-tuning driver shared by train_base and trojan insertion: each
// example is (token sequence, loss slots). Mutates `m` in place.
struct TrainExample {
  std::vector<int> tokens;                     // includes BOS
  std::vector<std::pair<int, int>> slots;      // (row, target id)
};

// Next-token prediction over an encoded sentence, BOS prepended and the tail
// dropped if the sentence exceeds max_len - 1 tokens.
TrainExample next_token_example(const std::vector<int>& ids, int max_len);
// sample_index picks the example for each batch slot; a null function means
// uniform over examples.
void adam_train(Model& m, const std::vector<TrainExample>& examples,
                const std::function<int(Rng&)>& sample_index, const TrainConfig& tc,
                std::vector<double>* step_losses);

// Mean per-token cross-entropy of the model on encoded sentences.
double corpus_loss(const Model& m, const std::vector<std::vector<int>>& seqs);

// Fraction of next-token positions where both models pick the same
// non-reserved argmax.
double top1_agreement(const Model& a, const Model& b, const std::vector<std::vector<int>>& seqs);

}  // namespace trojanlab
