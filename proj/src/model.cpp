#include "trojanlab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "trojanlab/io_util.hpp"
#include "trojanlab/kernels.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace trojanlab {

namespace K = kernels;
using io::json;

void LmConfig::validate() const {
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || ff_mult < 1 || max_len < 2)
    throw std::invalid_argument("LmConfig: dimensions must be positive (max_len >= 2)");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("LmConfig: d_model must be divisible by n_heads");
  if (vocab_symbols.size() < 6) throw std::invalid_argument("LmConfig: vocabulary too small");
  if (!(ln_eps > 0)) throw std::invalid_argument("LmConfig: ln_eps must be positive");
  Vocab v(vocab_symbols);  // validates symbol uniqueness
}

std::string LmConfig::to_json() const {
  json j;
  j["d_model"] = d_model;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["ff_mult"] = ff_mult;
  j["max_len"] = max_len;
  j["vocab_symbols"] = vocab_symbols;
  j["ln_eps"] = ln_eps;
  return j.dump();
}

LmConfig LmConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  io::require_keys(j, {"d_model", "n_layers", "n_heads", "ff_mult", "max_len", "vocab_symbols",
                       "ln_eps"},
                   "model config");
  LmConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.ff_mult = j.at("ff_mult").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.vocab_symbols = j.at("vocab_symbols").get<std::string>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.validate();
  return c;
}

std::vector<std::pair<std::string, std::pair<int, int>>> Model::param_spec(const LmConfig& cfg) {
  const int D = cfg.d_model, dh = cfg.head_dim(), F = cfg.ff_dim(), V = cfg.vocab_size();
  std::vector<std::pair<std::string, std::pair<int, int>>> spec;
  spec.emplace_back("tok_emb", std::make_pair(V, D));
  spec.emplace_back("pos_emb", std::make_pair(cfg.max_len, D));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string lp = "layers." + std::to_string(l) + ".";
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::string hp = lp + "attn.h" + std::to_string(h) + ".";
      spec.emplace_back(hp + "wq", std::make_pair(D, dh));
      spec.emplace_back(hp + "wk", std::make_pair(D, dh));
      spec.emplace_back(hp + "wv", std::make_pair(D, dh));
      spec.emplace_back(hp + "wo", std::make_pair(dh, D));
    }
    spec.emplace_back(lp + "ln1.g", std::make_pair(1, D));
    spec.emplace_back(lp + "ln1.b", std::make_pair(1, D));
    spec.emplace_back(lp + "ln2.g", std::make_pair(1, D));
    spec.emplace_back(lp + "ln2.b", std::make_pair(1, D));
    spec.emplace_back(lp + "mlp.w1", std::make_pair(D, F));
    spec.emplace_back(lp + "mlp.b1", std::make_pair(1, F));
    spec.emplace_back(lp + "mlp.w2", std::make_pair(F, D));
    spec.emplace_back(lp + "mlp.b2", std::make_pair(1, D));
  }
  spec.emplace_back("ln_f.g", std::make_pair(1, D));
  spec.emplace_back("ln_f.b", std::make_pair(1, D));
  spec.emplace_back("out.w", std::make_pair(D, V));
  spec.emplace_back("out.b", std::make_pair(1, V));
  std::sort(spec.begin(), spec.end());
  return spec;
}

namespace {

bool is_ln_gain(const std::string& name) {
  return name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
}

bool is_bias_like(const std::string& name) {
  if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0) return true;
  if (name.size() >= 3 && (name.compare(name.size() - 3, 3, ".b1") == 0 ||
                           name.compare(name.size() - 3, 3, ".b2") == 0))
    return true;
  return false;
}

}  // namespace

Model Model::init(const LmConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.config = cfg;
  Rng rng(derive_seed(seed, 0x6d6f64656c));
  for (const auto& [name, shape] : param_spec(cfg)) {
    Tensor t(shape.first, shape.second);
    if (is_ln_gain(name)) {
      for (auto& x : t.data) x = 1.0;
    } else if (is_bias_like(name)) {
      // zeros
    } else {
      for (auto& x : t.data) x = rng.normal() * 0.02;
    }
    m.params.emplace(name, std::move(t));
  }
  return m;
}

const Tensor& Model::p(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("Model: no parameter named " + name);
  return it->second;
}

Tensor& Model::p(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("Model: no parameter named " + name);
  return it->second;
}

namespace {

void append_u32(std::string& buf, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);
}

std::uint32_t read_u32(const std::string& buf, std::size_t& at) {
  if (at + 4 > buf.size()) throw std::runtime_error("checkpoint truncated");
  std::uint32_t v;
  std::memcpy(&v, buf.data() + at, 4);
  at += 4;
  return v;
}

}  // namespace

void Model::save(const std::string& path) const {
  std::string buf;
  buf.append("TLM1", 4);
  append_u32(buf, format_version);
  const std::string cfg = config.to_json();
  append_u32(buf, static_cast<std::uint32_t>(cfg.size()));
  buf.append(cfg);
  for (const auto& [name, t] : params)
    buf.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
  io::write_file_atomic(path, buf);
}

Model Model::load(const std::string& path) {
  const std::string buf = io::read_file(path);
  if (buf.size() < 12 || buf.compare(0, 4, "TLM1") != 0)
    throw std::runtime_error(path + ": not a TLM1 checkpoint");
  std::size_t at = 4;
  Model m;
  m.format_version = read_u32(buf, at);
  if (m.format_version != 1)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(m.format_version));
  const std::uint32_t cfg_len = read_u32(buf, at);
  if (at + cfg_len > buf.size()) throw std::runtime_error(path + ": checkpoint truncated");
  m.config = LmConfig::from_json(buf.substr(at, cfg_len));
  at += cfg_len;
  for (const auto& [name, shape] : param_spec(m.config)) {
    Tensor t(shape.first, shape.second);
    const std::size_t bytes = t.data.size() * sizeof(double);
    if (at + bytes > buf.size())
      throw std::runtime_error(path + ": checkpoint truncated at parameter " + name);
    std::memcpy(t.data.data(), buf.data() + at, bytes);
    at += bytes;
    m.params.emplace(name, std::move(t));
  }
  if (at != buf.size()) throw std::runtime_error(path + ": trailing bytes after parameters");
  return m;
}

std::uint64_t Model::content_hash() const {
  std::uint64_t h = io::fnv1a_str(config.to_json());
  for (const auto& [name, t] : params) {
    h = io::fnv1a(name.data(), name.size(), h);
    h = io::fnv1a(t.data.data(), t.data.size() * sizeof(double), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Runner

Runner::Runner(const Model& m) : m_(&m) {
  const LmConfig& c = m.config;
  c.validate();
  tok_emb_ = &m.p("tok_emb");
  pos_emb_ = &m.p("pos_emb");
  lnfg_ = &m.p("ln_f.g");
  lnfb_ = &m.p("ln_f.b");
  outw_ = &m.p("out.w");
  outb_ = &m.p("out.b");
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string lp = "layers." + std::to_string(l) + ".";
    ln1g_.push_back(&m.p(lp + "ln1.g"));
    ln1b_.push_back(&m.p(lp + "ln1.b"));
    ln2g_.push_back(&m.p(lp + "ln2.g"));
    ln2b_.push_back(&m.p(lp + "ln2.b"));
    w1_.push_back(&m.p(lp + "mlp.w1"));
    b1_.push_back(&m.p(lp + "mlp.b1"));
    w2_.push_back(&m.p(lp + "mlp.w2"));
    b2_.push_back(&m.p(lp + "mlp.b2"));
    for (int h = 0; h < c.n_heads; ++h) {
      const std::string hp = lp + "attn.h" + std::to_string(h) + ".";
      wq_.push_back(&m.p(hp + "wq"));
      wk_.push_back(&m.p(hp + "wk"));
      wv_.push_back(&m.p(hp + "wv"));
      wo_.push_back(&m.p(hp + "wo"));
    }
  }
}

KvCache Runner::make_cache() const {
  const LmConfig& c = m_->config;
  KvCache cache;
  const int n = c.n_layers * c.n_heads;
  cache.k.reserve(n);
  cache.v.reserve(n);
  for (int i = 0; i < n; ++i) {
    cache.k.emplace_back(c.max_len, c.head_dim());
    cache.v.emplace_back(c.max_len, c.head_dim());
  }
  return cache;
}

void Runner::extend(KvCache& cache, const std::vector<int>& ids, Tensor* logits) {
  extend_impl(cache, ids, logits);
}

void Runner::extend_impl(KvCache& cache, const std::vector<int>& ids, Tensor* logits) {
  const LmConfig& c = m_->config;
  const int D = c.d_model, dh = c.head_dim(), F = c.ff_dim(), V = c.vocab_size();
  const int Tn = static_cast<int>(ids.size());
  const int L0 = cache.len;
  const int L = L0 + Tn;
  if (Tn == 0) throw std::invalid_argument("Runner::extend: empty input");
  if (L > c.max_len)
    throw std::invalid_argument("Runner::extend: sequence length " + std::to_string(L) +
                                " exceeds max_len " + std::to_string(c.max_len));

  Tensor x(Tn, D);
  for (int i = 0; i < Tn; ++i) {
    const int id = ids[i];
    if (id < 0 || id >= V)
      throw std::out_of_range("Runner::extend: token id " + std::to_string(id) + " out of range");
    K::add(tok_emb_->row_ptr(id), pos_emb_->row_ptr(L0 + i), x.row_ptr(i),
           static_cast<std::size_t>(D));
  }

  Tensor h(Tn, D), stats(Tn, 2), q(Tn, dh), s(Tn, L), a(Tn, L), ctx(Tn, dh), proj(Tn, D),
      attn(Tn, D), g1(Tn, F), g2(Tn, F), mm(Tn, D);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int l = 0; l < c.n_layers; ++l) {
    K::layernorm_rows(x.data.data(), ln1g_[l]->data.data(), ln1b_[l]->data.data(), h.data.data(),
                      stats.data.data(), Tn, D, c.ln_eps);
    for (int hd = 0; hd < c.n_heads; ++hd) {
      const int idx = l * c.n_heads + hd;
      Tensor& kbuf = cache.k[idx];
      Tensor& vbuf = cache.v[idx];
      K::matmul(h.data.data(), wq_[idx]->data.data(), q.data.data(), Tn, D, dh);
      K::matmul(h.data.data(), wk_[idx]->data.data(), kbuf.row_ptr(L0), Tn, D, dh);
      K::matmul(h.data.data(), wv_[idx]->data.data(), vbuf.row_ptr(L0), Tn, D, dh);
      K::matmul_nt(q.data.data(), kbuf.data.data(), s.data.data(), Tn, dh, L);
      K::scale(s.data.data(), inv_sqrt_dh, s.data.data(), static_cast<std::size_t>(Tn) * L);
      for (int i = 0; i < Tn; ++i) {
        double* sr = s.row_ptr(i);
        for (int j = L0 + i + 1; j < L; ++j) sr[j] += -1e30;
      }
      K::softmax_rows(s.data.data(), a.data.data(), Tn, L);
      K::matmul(a.data.data(), vbuf.data.data(), ctx.data.data(), Tn, L, dh);
      if (hd == 0) {
        K::matmul(ctx.data.data(), wo_[idx]->data.data(), attn.data.data(), Tn, dh, D);
      } else {
        K::matmul(ctx.data.data(), wo_[idx]->data.data(), proj.data.data(), Tn, dh, D);
        K::add(attn.data.data(), proj.data.data(), attn.data.data(),
               static_cast<std::size_t>(Tn) * D);
      }
    }
    K::add(x.data.data(), attn.data.data(), x.data.data(), static_cast<std::size_t>(Tn) * D);

    K::layernorm_rows(x.data.data(), ln2g_[l]->data.data(), ln2b_[l]->data.data(), h.data.data(),
                      stats.data.data(), Tn, D, c.ln_eps);
    K::matmul(h.data.data(), w1_[l]->data.data(), g1.data.data(), Tn, D, F);
    for (int i = 0; i < Tn; ++i)
      K::add(g1.row_ptr(i), b1_[l]->data.data(), g1.row_ptr(i), static_cast<std::size_t>(F));
    K::gelu(g1.data.data(), g2.data.data(), static_cast<std::size_t>(Tn) * F);
    K::matmul(g2.data.data(), w2_[l]->data.data(), mm.data.data(), Tn, F, D);
    for (int i = 0; i < Tn; ++i)
      K::add(mm.row_ptr(i), b2_[l]->data.data(), mm.row_ptr(i), static_cast<std::size_t>(D));
    K::add(x.data.data(), mm.data.data(), x.data.data(), static_cast<std::size_t>(Tn) * D);
  }

  cache.len = L;
  if (logits) {
    K::layernorm_rows(x.data.data(), lnfg_->data.data(), lnfb_->data.data(), h.data.data(),
                      stats.data.data(), Tn, D, c.ln_eps);
    *logits = Tensor(Tn, V);
    K::matmul(h.data.data(), outw_->data.data(), logits->data.data(), Tn, D, V);
    for (int i = 0; i < Tn; ++i)
      K::add(logits->row_ptr(i), outb_->data.data(), logits->row_ptr(i),
             static_cast<std::size_t>(V));
  }
}

Tensor Runner::forward_logits(const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward_logits: empty input");
  KvCache cache = make_cache();
  Tensor logits;
  extend(cache, tokens, &logits);
  return logits;
}

double Runner::sequence_logprob(const std::vector<int>& prompt,
                                const std::vector<int>& continuation) {
  if (continuation.empty()) throw std::invalid_argument("sequence_logprob: empty continuation");
  const int total = 1 + static_cast<int>(prompt.size() + continuation.size());
  if (total > m_->config.max_len + 1)
    throw std::invalid_argument("sequence_logprob: combined length exceeds max_len");
  std::vector<int> seq;
  seq.reserve(static_cast<std::size_t>(total) - 1);
  seq.push_back(Vocab::kBos);
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end() - 1);
  KvCache cache = make_cache();
  Tensor logits;
  extend(cache, seq, &logits);
  const int V = m_->config.vocab_size();
  std::vector<double> lsm(static_cast<std::size_t>(V));
  double lp = 0.0;
  const int m = static_cast<int>(prompt.size());
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const int row = m + static_cast<int>(i);
    K::log_softmax_rows(logits.row_ptr(row), lsm.data(), 1, V);
    lp += lsm[static_cast<std::size_t>(continuation[i])];
  }
  return lp;
}

std::string Runner::greedy_generate(const std::vector<int>& prompt, int char_budget) {
  if (char_budget < 1) throw std::invalid_argument("greedy_generate: char_budget must be >= 1");
  const LmConfig& c = m_->config;
  const int V = c.vocab_size();
  std::vector<int> context;  // prompt plus generated ids, without BOS
  context.reserve(prompt.size() + static_cast<std::size_t>(char_budget));
  // Keep only what fits alongside BOS if the prompt is over-long.
  std::size_t start = 0;
  if (static_cast<int>(prompt.size()) > c.max_len - 1)
    start = prompt.size() - static_cast<std::size_t>(c.max_len - 1);
  context.insert(context.end(), prompt.begin() + static_cast<std::ptrdiff_t>(start), prompt.end());

  KvCache cache = make_cache();
  Tensor logits;
  std::vector<int> feed;
  feed.push_back(Vocab::kBos);
  feed.insert(feed.end(), context.begin(), context.end());
  extend(cache, feed, &logits);

  const Vocab vocab = m_->vocab();
  std::string text;
  while (true) {
    const double* row = logits.row_ptr(logits.rows - 1);
    int best = 2;
    for (int id = 3; id < V; ++id)
      if (row[id] > row[best]) best = id;
    text.push_back(vocab.decode_id(best));
    if (static_cast<int>(text.size()) >= char_budget) break;
    context.push_back(best);
    if (cache.len == c.max_len) {
      // Slide the window: rebuild the cache over the most recent tokens.
      cache = make_cache();
      feed.clear();
      feed.push_back(Vocab::kBos);
      feed.insert(feed.end(), context.end() - (c.max_len - 1), context.end());
      extend(cache, feed, &logits);
    } else {
      extend(cache, {best}, &logits);
    }
  }
  return text.substr(0, static_cast<std::size_t>(char_budget));
}

Tensor forward_logits(const Model& m, const std::vector<int>& tokens) {
  Runner r(m);
  return r.forward_logits(tokens);
}

double sequence_logprob(const Model& m, const std::vector<int>& prompt,
                        const std::vector<int>& continuation) {
  Runner r(m);
  return r.sequence_logprob(prompt, continuation);
}

std::string greedy_generate(const Model& m, const std::vector<int>& prompt, int char_budget) {
  Runner r(m);
  return r.greedy_generate(prompt, char_budget);
}

// ---------------------------------------------------------------------------
// LmGraph

LmGraph::LmGraph(const Model& m, Tape& tape, bool params_require_grad)
    : m_(&m), tape_(&tape), pgrad_(params_require_grad) {}

int LmGraph::param_leaf(const std::string& name) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  const int id = tape_->leaf(m_->p(name), pgrad_);
  leaves_.emplace(name, id);
  return id;
}

int LmGraph::forward_logits(const std::vector<Seg>& segs) {
  const LmConfig& c = m_->config;
  const int D = c.d_model, dh = c.head_dim();
  const int tok = param_leaf("tok_emb");

  std::vector<int> parts;
  for (const Seg& s : segs) {
    if (s.node >= 0) {
      const Tensor& v = tape_->value(s.node);
      if (s.node_is_distribution) {
        if (v.cols != c.vocab_size())
          throw std::invalid_argument("LmGraph: distribution rows must span the vocabulary");
        parts.push_back(tape_->matmul(s.node, tok));
      } else {
        if (v.cols != D) throw std::invalid_argument("LmGraph: embedding rows must be d_model");
        parts.push_back(s.node);
      }
    } else {
      parts.push_back(tape_->embedding_gather(tok, s.ids));
    }
  }
  const int emb = parts.size() == 1 ? parts[0] : tape_->concat_rows(parts);
  const int T = tape_->value(emb).rows;
  if (T < 1) throw std::invalid_argument("LmGraph: empty sequence");
  if (T > c.max_len)
    throw std::invalid_argument("LmGraph: sequence length " + std::to_string(T) +
                                " exceeds max_len " + std::to_string(c.max_len));

  std::vector<int> pos_ids(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) pos_ids[static_cast<std::size_t>(i)] = i;
  int x = tape_->add(emb, tape_->embedding_gather(param_leaf("pos_emb"), pos_ids));

  Tensor mask(T, T);
  for (int i = 0; i < T; ++i)
    for (int j = i + 1; j < T; ++j) mask.at(i, j) = -1e30;
  const int mask_leaf = tape_->leaf(std::move(mask));
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int l = 0; l < c.n_layers; ++l) {
    const std::string lp = "layers." + std::to_string(l) + ".";
    const int h =
        tape_->layernorm_rows(x, param_leaf(lp + "ln1.g"), param_leaf(lp + "ln1.b"), c.ln_eps);
    int attn = -1;
    for (int hd = 0; hd < c.n_heads; ++hd) {
      const std::string hp = lp + "attn.h" + std::to_string(hd) + ".";
      const int q = tape_->matmul(h, param_leaf(hp + "wq"));
      const int k = tape_->matmul(h, param_leaf(hp + "wk"));
      const int v = tape_->matmul(h, param_leaf(hp + "wv"));
      const int s = tape_->scale(tape_->matmul_nt(q, k), inv_sqrt_dh);
      const int a = tape_->softmax_rows(tape_->add(s, mask_leaf));
      const int ctx = tape_->matmul(a, v);
      const int proj = tape_->matmul(ctx, param_leaf(hp + "wo"));
      attn = attn < 0 ? proj : tape_->add(attn, proj);
    }
    x = tape_->add(x, attn);
    const int h2 =
        tape_->layernorm_rows(x, param_leaf(lp + "ln2.g"), param_leaf(lp + "ln2.b"), c.ln_eps);
    const int g1 = tape_->add_bias(tape_->matmul(h2, param_leaf(lp + "mlp.w1")),
                                   param_leaf(lp + "mlp.b1"));
    const int mm = tape_->add_bias(tape_->matmul(tape_->gelu(g1), param_leaf(lp + "mlp.w2")),
                                   param_leaf(lp + "mlp.b2"));
    x = tape_->add(x, mm);
  }
  const int f = tape_->layernorm_rows(x, param_leaf("ln_f.g"), param_leaf("ln_f.b"), c.ln_eps);
  return tape_->add_bias(tape_->matmul(f, param_leaf("out.w")), param_leaf("out.b"));
}

int LmGraph::ce_loss(int logits_node, const std::vector<std::pair<int, int>>& slots) {
  return tape_->cross_entropy(logits_node, slots);
}

// ---------------------------------------------------------------------------
// Gradient surfaces

Tensor onehot_grad(const Model& m, const std::vector<int>& prompt, const std::vector<int>& target,
                   const std::vector<int>& positions) {
  if (prompt.empty()) throw std::invalid_argument("onehot_grad: empty prompt");
  if (target.empty()) throw std::invalid_argument("onehot_grad: empty target");
  const int V = m.config.vocab_size();
  const int n = static_cast<int>(prompt.size());
  for (int p : positions)
    if (p < 0 || p >= n)
      throw std::out_of_range("onehot_grad: position " + std::to_string(p) + " out of range");

  Tensor onehot(n, V);
  for (int i = 0; i < n; ++i) {
    if (prompt[static_cast<std::size_t>(i)] < 0 || prompt[static_cast<std::size_t>(i)] >= V)
      throw std::out_of_range("onehot_grad: prompt token out of range");
    onehot.at(i, prompt[static_cast<std::size_t>(i)]) = 1.0;
  }

  Tape tape;
  LmGraph g(m, tape, false);
  const int dist = tape.leaf(std::move(onehot), true);
  std::vector<LmGraph::Seg> segs;
  segs.push_back(LmGraph::Seg::tokens({Vocab::kBos}));
  segs.push_back(LmGraph::Seg::dist(dist));
  segs.push_back(LmGraph::Seg::tokens(target));
  const int logits = g.forward_logits(segs);
  std::vector<std::pair<int, int>> slots;
  for (std::size_t i = 0; i < target.size(); ++i)
    slots.emplace_back(n + static_cast<int>(i), target[i]);
  const int loss = g.ce_loss(logits, slots);
  auto adj = tape.backward(loss);
  const Tensor& d = adj[static_cast<std::size_t>(dist)];

  Tensor out(static_cast<int>(positions.size()), V);
  for (std::size_t r = 0; r < positions.size(); ++r)
    std::memcpy(out.row_ptr(static_cast<int>(r)), d.row_ptr(positions[r]),
                sizeof(double) * static_cast<std::size_t>(V));
  return out;
}

double soft_forward(const Model& m, const Tensor& soft_prompt, const std::vector<int>& target,
                    bool embedding_mode, Tensor* grad_out) {
  if (target.empty()) throw std::invalid_argument("soft_forward: empty target");
  const int V = m.config.vocab_size();
  const int D = m.config.d_model;
  const int n = soft_prompt.rows;
  if (n < 1) throw std::invalid_argument("soft_forward: empty soft prompt");
  if (embedding_mode) {
    if (soft_prompt.cols != D)
      throw std::invalid_argument("soft_forward: embedding rows must have d_model columns");
  } else {
    if (soft_prompt.cols != V)
      throw std::invalid_argument("soft_forward: distribution rows must span the vocabulary");
    for (int r = 0; r < n; ++r) {
      double s = 0.0;
      for (int j = 0; j < V; ++j) s += soft_prompt.at(r, j);
      if (std::fabs(s - 1.0) > 1e-3)
        throw std::invalid_argument("soft_forward: row " + std::to_string(r) +
                                    " is not a distribution (sum " + std::to_string(s) + ")");
    }
  }

  Tape tape;
  LmGraph g(m, tape, false);
  const int soft = tape.leaf(soft_prompt, grad_out != nullptr);
  std::vector<LmGraph::Seg> segs;
  segs.push_back(LmGraph::Seg::tokens({Vocab::kBos}));
  segs.push_back(embedding_mode ? LmGraph::Seg::emb(soft) : LmGraph::Seg::dist(soft));
  segs.push_back(LmGraph::Seg::tokens(target));
  const int logits = g.forward_logits(segs);
  std::vector<std::pair<int, int>> slots;
  for (std::size_t i = 0; i < target.size(); ++i)
    slots.emplace_back(n + static_cast<int>(i), target[i]);
  const int loss = g.ce_loss(logits, slots);
  if (grad_out) {
    auto adj = tape.backward(loss);
    *grad_out = adj[static_cast<std::size_t>(soft)];
  }
  return tape.value(loss).data[0];
}

// ---------------------------------------------------------------------------
// Training

void adam_train(Model& m, const std::vector<TrainExample>& examples,
                const std::function<int(Rng&)>& sample_index, const TrainConfig& tc,
                std::vector<double>* step_losses) {
  if (examples.empty()) throw std::invalid_argument("adam_train: no examples");
  const int n_examples = static_cast<int>(examples.size());
  const std::function<int(Rng&)> pick =
      sample_index ? sample_index : [n_examples](Rng& r) { return r.uniform_int(n_examples); };
  for (const auto& ex : examples) {
    if (static_cast<int>(ex.tokens.size()) > m.config.max_len)
      throw std::invalid_argument("adam_train: example exceeds max_len");
    if (ex.slots.empty()) throw std::invalid_argument("adam_train: example without loss slots");
  }

  std::map<std::string, Tensor> mom1, mom2, grad;
  for (const auto& [name, t] : m.params) {
    mom1.emplace(name, Tensor(t.rows, t.cols));
    mom2.emplace(name, Tensor(t.rows, t.cols));
    grad.emplace(name, Tensor(t.rows, t.cols));
  }

  Rng rng(derive_seed(tc.seed, 0x747261696e));
  for (int step = 1; step <= tc.steps; ++step) {
    for (auto& [name, t] : grad) std::fill(t.data.begin(), t.data.end(), 0.0);
    double batch_loss = 0.0;
    std::size_t batch_slots = 0;

    for (int b = 0; b < tc.batch_size; ++b) {
      const int idx = pick(rng);
      const TrainExample& ex = examples[static_cast<std::size_t>(idx)];
      Tape tape;
      LmGraph g(m, tape, true);
      const int logits = g.forward_logits({LmGraph::Seg::tokens(ex.tokens)});
      const int loss = g.ce_loss(logits, ex.slots);
      batch_loss += tape.value(loss).data[0];
      batch_slots += ex.slots.size();
      auto adj = tape.backward(loss);
      for (const auto& [name, t] : m.params) {
        (void)t;
        const Tensor& a = adj[static_cast<std::size_t>(g.param_leaf(name))];
        if (a.numel() == 0) continue;
        K::axpy(1.0, a.data.data(), grad.at(name).data.data(), a.numel());
      }
    }

    const double inv_slots = 1.0 / static_cast<double>(batch_slots);
    const double warm = tc.warmup_steps > 0
                            ? std::min(1.0, static_cast<double>(step) / tc.warmup_steps)
                            : 1.0;
    const double lr = tc.lr * warm;
    const double bc1 = 1.0 - std::pow(tc.adam_beta1, step);
    const double bc2 = 1.0 - std::pow(tc.adam_beta2, step);
    for (auto& [name, t] : m.params) {
      Tensor& g1 = mom1.at(name);
      Tensor& g2 = mom2.at(name);
      const Tensor& gr = grad.at(name);
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        const double gi = gr.data[i] * inv_slots;
        g1.data[i] = tc.adam_beta1 * g1.data[i] + (1.0 - tc.adam_beta1) * gi;
        g2.data[i] = tc.adam_beta2 * g2.data[i] + (1.0 - tc.adam_beta2) * gi * gi;
        const double mhat = g1.data[i] / bc1;
        const double vhat = g2.data[i] / bc2;
        t.data[i] -= lr * mhat / (std::sqrt(vhat) + tc.adam_eps);
      }
    }
    if (step_losses) step_losses->push_back(batch_loss * inv_slots);
  }
}

TrainExample next_token_example(const std::vector<int>& ids, int max_len) {
  TrainExample ex;
  ex.tokens.push_back(Vocab::kBos);
  const std::size_t keep = std::min(ids.size(), static_cast<std::size_t>(max_len) - 1);
  ex.tokens.insert(ex.tokens.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep));
  for (std::size_t i = 0; i + 1 < ex.tokens.size(); ++i)
    ex.slots.emplace_back(static_cast<int>(i), ex.tokens[i + 1]);
  return ex;
}

Model train_base(const std::vector<std::string>& corpus, const LmConfig& cfg,
                 const TrainConfig& tc, TrainStats* stats) {
  if (corpus.empty()) throw std::invalid_argument("train_base: empty corpus");
  cfg.validate();
  const Vocab vocab(cfg.vocab_symbols);

  std::vector<std::vector<int>> seqs;
  seqs.reserve(corpus.size());
  for (const auto& s : corpus) seqs.push_back(vocab.encode(s));

  Rng split_rng(derive_seed(tc.seed, 0x73706c6974));
  std::vector<std::size_t> order(seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  split_rng.shuffle(order);
  std::size_t n_val = static_cast<std::size_t>(tc.val_fraction * static_cast<double>(seqs.size()));
  if (tc.val_fraction > 0 && n_val == 0 && seqs.size() > 1) n_val = 1;

  std::vector<TrainExample> train_ex;
  std::vector<std::vector<int>> val_seqs;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (seqs[order[i]].empty()) continue;
    if (i < n_val)
      val_seqs.push_back(seqs[order[i]]);
    else
      train_ex.push_back(next_token_example(seqs[order[i]], cfg.max_len));
  }
  if (train_ex.empty()) throw std::invalid_argument("train_base: no usable training sentences");

  Model m = Model::init(cfg, derive_seed(tc.seed, 0x696e6974));
  std::vector<double> losses;
  const int n_train = static_cast<int>(train_ex.size());
  adam_train(
      m, train_ex, [n_train](Rng& r) { return static_cast<int>(r.uniform_int(n_train)); }, tc,
      &losses);

  if (stats) {
    stats->steps = tc.steps;
    stats->uniform_loss = std::log(static_cast<double>(cfg.vocab_size()));
    const std::size_t tail = std::min<std::size_t>(losses.size(), 50);
    double t = 0.0;
    for (std::size_t i = losses.size() - tail; i < losses.size(); ++i) t += losses[i];
    stats->train_loss = tail ? t / static_cast<double>(tail) : 0.0;
    stats->val_loss = val_seqs.empty() ? 0.0 : corpus_loss(m, val_seqs);
  }
  return m;
}

double corpus_loss(const Model& m, const std::vector<std::vector<int>>& seqs) {
  Runner r(m);
  const int V = m.config.vocab_size();
  std::vector<double> lsm(static_cast<std::size_t>(V));
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ids : seqs) {
    if (ids.empty()) continue;
    TrainExample ex = next_token_example(ids, m.config.max_len);
    KvCache cache = r.make_cache();
    Tensor logits;
    r.extend(cache, ex.tokens, &logits);
    for (const auto& [row, id] : ex.slots) {
      K::log_softmax_rows(logits.row_ptr(row), lsm.data(), 1, V);
      total -= lsm[static_cast<std::size_t>(id)];
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

double top1_agreement(const Model& a, const Model& b, const std::vector<std::vector<int>>& seqs) {
  Runner ra(a), rb(b);
  const int V = a.config.vocab_size();
  std::size_t agree = 0, count = 0;
  for (const auto& ids : seqs) {
    if (ids.empty()) continue;
    TrainExample ex = next_token_example(ids, std::min(a.config.max_len, b.config.max_len));
    KvCache ca = ra.make_cache(), cb = rb.make_cache();
    Tensor la, lb;
    ra.extend(ca, ex.tokens, &la);
    rb.extend(cb, ex.tokens, &lb);
    for (const auto& [row, id] : ex.slots) {
      (void)id;
      const double* pa = la.row_ptr(row);
      const double* pb = lb.row_ptr(row);
      int ba = 2, bb = 2;
      for (int v = 3; v < V; ++v) {
        if (pa[v] > pa[ba]) ba = v;
        if (pb[v] > pb[bb]) bb = v;
      }
      agree += (ba == bb) ? 1 : 0;
      ++count;
    }
  }
  return count ? static_cast<double>(agree) / static_cast<double>(count) : 1.0;
}

}  // namespace trojanlab
