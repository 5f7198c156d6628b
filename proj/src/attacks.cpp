#include "trojanlab/attacks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "trojanlab/kernels.hpp"
#include "trojanlab/markov.hpp"
#include "trojanlab/rng.hpp"

namespace trojanlab {

const char* to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::uat: return "uat";
    case AttackMethod::gbda: return "gbda";
    case AttackMethod::pez: return "pez";
    case AttackMethod::gcg: return "gcg";
    case AttackMethod::arca: return "arca";
    case AttackMethod::random_baseline: return "random_baseline";
  }
  return "?";
}

AttackMethod attack_method_from_string(const std::string& s) {
  for (AttackMethod m : {AttackMethod::uat, AttackMethod::gbda, AttackMethod::pez,
                         AttackMethod::gcg, AttackMethod::arca, AttackMethod::random_baseline})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown attack method \"" + s + "\"");
}

void AttackConfig::validate() const {
  if (prompt_len < 1) throw std::invalid_argument("attack: prompt_len must be >= 1");
  if (iterations < 0) throw std::invalid_argument("attack: iterations must be >= 0");
  if (keep_candidates < 1) throw std::invalid_argument("attack: keep_candidates must be >= 1");
  if (uat.beam_width < 1 || uat.top_k < 1)
    throw std::invalid_argument("attack: uat counts must be >= 1");
  if (!(gbda.temperature > 0.0))
    throw std::invalid_argument("attack: gbda temperature must be > 0");
  if (gbda.lambda_lm < 0.0) throw std::invalid_argument("attack: gbda lambda_lm must be >= 0");
  if (gbda.n_samples < 1) throw std::invalid_argument("attack: gbda n_samples must be >= 1");
  if (!(gbda.learning_rate > 0.0))
    throw std::invalid_argument("attack: gbda learning_rate must be > 0");
  if (pez.learning_rate < 0.0)
    throw std::invalid_argument("attack: pez learning_rate must be >= 0");
  if (gcg.top_k < 1 || gcg.batch < 1)
    throw std::invalid_argument("attack: gcg counts must be >= 1");
  if (gcg.position_set != "all" && gcg.position_set != "random_one")
    throw std::invalid_argument("attack: gcg position_set must be \"all\" or \"random_one\"");
  if (gcg.position_set == "all" && gcg.batch > gcg.top_k * prompt_len)
    throw std::invalid_argument("attack: gcg batch exceeds top_k * prompt_len");
  if (arca.mode != "fixed_output" && arca.mode != "joint")
    throw std::invalid_argument("attack: arca mode must be \"fixed_output\" or \"joint\"");
  if (arca.lambda_llm < 0.0) throw std::invalid_argument("attack: arca lambda_llm must be >= 0");
  if (arca.top_k < 1 || arca.lin_samples < 1)
    throw std::invalid_argument("attack: arca counts must be >= 1");
  if (arca.match_bonus < 0.0) throw std::invalid_argument("attack: arca match_bonus must be >= 0");
}

io::json AttackConfig::to_json() const {
  io::json j;
  j["method"] = to_string(method);
  j["prompt_len"] = prompt_len;
  j["iterations"] = iterations;
  j["seed"] = seed;
  j["early_exit"] = early_exit;
  j["keep_candidates"] = keep_candidates;
  j["uat"] = {{"beam_width", uat.beam_width}, {"top_k", uat.top_k}};
  j["gbda"] = {{"temperature", gbda.temperature},
               {"lambda_lm", gbda.lambda_lm},
               {"n_samples", gbda.n_samples},
               {"learning_rate", gbda.learning_rate}};
  j["pez"] = {{"learning_rate", pez.learning_rate}};
  j["gcg"] = {{"top_k", gcg.top_k}, {"batch", gcg.batch}, {"position_set", gcg.position_set}};
  j["arca"] = {{"mode", arca.mode},
               {"lambda_llm", arca.lambda_llm},
               {"top_k", arca.top_k},
               {"lin_samples", arca.lin_samples},
               {"match_bonus", arca.match_bonus}};
  return j;
}

AttackConfig AttackConfig::from_json(const io::json& j) {
  io::require_keys(j,
                   {"method", "prompt_len", "iterations", "seed", "early_exit", "keep_candidates",
                    "uat", "gbda", "pez", "gcg", "arca"},
                   "attack config");
  AttackConfig c;
  if (j.contains("method")) c.method = attack_method_from_string(j.at("method").get<std::string>());
  if (j.contains("prompt_len")) c.prompt_len = j.at("prompt_len").get<int>();
  if (j.contains("iterations")) c.iterations = j.at("iterations").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("early_exit")) c.early_exit = j.at("early_exit").get<bool>();
  if (j.contains("keep_candidates")) c.keep_candidates = j.at("keep_candidates").get<int>();
  if (j.contains("uat")) {
    const io::json& u = j.at("uat");
    io::require_keys(u, {"beam_width", "top_k"}, "attack config uat");
    if (u.contains("beam_width")) c.uat.beam_width = u.at("beam_width").get<int>();
    if (u.contains("top_k")) c.uat.top_k = u.at("top_k").get<int>();
  }
  if (j.contains("gbda")) {
    const io::json& g = j.at("gbda");
    io::require_keys(g, {"temperature", "lambda_lm", "n_samples", "learning_rate"},
                     "attack config gbda");
    if (g.contains("temperature")) c.gbda.temperature = g.at("temperature").get<double>();
    if (g.contains("lambda_lm")) c.gbda.lambda_lm = g.at("lambda_lm").get<double>();
    if (g.contains("n_samples")) c.gbda.n_samples = g.at("n_samples").get<int>();
    if (g.contains("learning_rate")) c.gbda.learning_rate = g.at("learning_rate").get<double>();
  }
  if (j.contains("pez")) {
    const io::json& p = j.at("pez");
    io::require_keys(p, {"learning_rate"}, "attack config pez");
    if (p.contains("learning_rate")) c.pez.learning_rate = p.at("learning_rate").get<double>();
  }
  if (j.contains("gcg")) {
    const io::json& g = j.at("gcg");
    io::require_keys(g, {"top_k", "batch", "position_set"}, "attack config gcg");
    if (g.contains("top_k")) c.gcg.top_k = g.at("top_k").get<int>();
    if (g.contains("batch")) c.gcg.batch = g.at("batch").get<int>();
    if (g.contains("position_set")) c.gcg.position_set = g.at("position_set").get<std::string>();
  }
  if (j.contains("arca")) {
    const io::json& a = j.at("arca");
    io::require_keys(a, {"mode", "lambda_llm", "top_k", "lin_samples", "match_bonus"},
                     "attack config arca");
    if (a.contains("mode")) c.arca.mode = a.at("mode").get<std::string>();
    if (a.contains("lambda_llm")) c.arca.lambda_llm = a.at("lambda_llm").get<double>();
    if (a.contains("top_k")) c.arca.top_k = a.at("top_k").get<int>();
    if (a.contains("lin_samples")) c.arca.lin_samples = a.at("lin_samples").get<int>();
    if (a.contains("match_bonus")) c.arca.match_bonus = a.at("match_bonus").get<double>();
  }
  c.validate();
  return c;
}

io::json AttackResult::to_json() const {
  io::json j;
  j["target"] = target;
  j["method"] = to_string(method);
  io::json cands = io::json::array();
  for (const AttackCandidate& c : candidates)
    cands.push_back(
        {{"trigger", c.trigger}, {"loss", c.loss}, {"forces_target", c.forces_target}});
  j["candidates"] = cands;
  j["iterations_used"] = iterations_used;
  j["wall_time"] = wall_time;
  j["committed_losses"] = committed_losses;
  return j;
}

AttackResult AttackResult::from_json(const io::json& j) {
  io::require_keys(
      j, {"target", "method", "candidates", "iterations_used", "wall_time", "committed_losses"},
      "attack result");
  AttackResult r;
  r.target = j.at("target").get<std::string>();
  r.method = attack_method_from_string(j.at("method").get<std::string>());
  for (const io::json& c : j.at("candidates")) {
    io::require_keys(c, {"trigger", "loss", "forces_target"}, "attack result candidate");
    r.candidates.push_back({c.at("trigger").get<std::string>(), c.at("loss").get<double>(),
                            c.at("forces_target").get<bool>()});
  }
  r.iterations_used = j.at("iterations_used").get<int>();
  r.wall_time = j.at("wall_time").get<double>();
  if (j.contains("committed_losses"))
    r.committed_losses = j.at("committed_losses").get<std::vector<double>>();
  return r;
}

int nearest_embedding_row(const Tensor& table, const double* point, int first_id) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (int id = first_id; id < table.rows; ++id) {
    const double* row = table.row_ptr(id);
    double d = 0.0;
    for (int j = 0; j < table.cols; ++j) {
      const double diff = row[j] - point[j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = id;
    }
  }
  if (best < 0) throw std::invalid_argument("nearest_embedding_row: no rows to project onto");
  return best;
}

namespace {

// Dedups prompts across a search and assembles the final ranked candidate
// list. Ordering is canonical: (loss, token sequence).
class CandidateBook {
 public:
  void add(const std::vector<int>& x, double loss) {
    auto [it, fresh] = seen_.try_emplace(x, loss);
    if (!fresh && loss < it->second) it->second = loss;
  }

  std::vector<AttackCandidate> finish(const LossSurface& s, int keep) const {
    std::vector<std::pair<double, const std::vector<int>*>> order;
    order.reserve(seen_.size());
    for (const auto& [x, loss] : seen_) order.emplace_back(loss, &x);
    std::stable_sort(order.begin(), order.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    if (static_cast<int>(order.size()) > keep) order.resize(static_cast<std::size_t>(keep));
    std::vector<AttackCandidate> out;
    out.reserve(order.size());
    for (const auto& [loss, xp] : order) {
      AttackCandidate c;
      c.trigger = s.decode ? s.decode(*xp) : fallback_decode(*xp);
      c.loss = loss;
      c.forces_target = s.forces ? s.forces(*xp) : false;
      out.push_back(std::move(c));
    }
    return out;
  }

 private:
  static std::string fallback_decode(const std::vector<int>& x) {
    std::string s;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (i) s += ' ';
      s += std::to_string(x[i]);
    }
    return s;
  }
  std::map<std::vector<int>, double> seen_;
};

std::vector<double> eval_edits(const LossSurface& s, const std::vector<int>& x,
                               const std::vector<std::pair<int, int>>& edits) {
  if (s.edit_losses) return s.edit_losses(x, edits);
  std::vector<double> out(edits.size());
  std::vector<int> y = x;
  for (std::size_t i = 0; i < edits.size(); ++i) {
    const auto [p, v] = edits[i];
    const int old = y[static_cast<std::size_t>(p)];
    y[static_cast<std::size_t>(p)] = v;
    out[i] = s.loss(y);
    y[static_cast<std::size_t>(p)] = old;
  }
  return out;
}

bool check_forces(const LossSurface& s, const std::vector<int>& x) {
  return s.forces && s.forces(x);
}

// ids with the smallest score entries, ties to the lower id.
std::vector<int> smallest_k(const double* row, int first_id, int vocab, int k) {
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(vocab - first_id));
  for (int v = first_id; v < vocab; ++v) ids.push_back(v);
  const int kk = std::min<int>(k, static_cast<int>(ids.size()));
  std::partial_sort(ids.begin(), ids.begin() + kk, ids.end(), [row](int a, int b) {
    if (row[a] != row[b]) return row[a] < row[b];
    return a < b;
  });
  ids.resize(static_cast<std::size_t>(kk));
  return ids;
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

int space_or_first_id(const Vocab& vocab) {
  return vocab.knows(' ') ? vocab.encode_char(' ') : Vocab::kReservedIds;
}

std::vector<int> fit_init(std::vector<int> tokens, int m, int pad_id) {
  if (static_cast<int>(tokens.size()) > m) tokens.resize(static_cast<std::size_t>(m));
  while (static_cast<int>(tokens.size()) < m) tokens.push_back(pad_id);
  return tokens;
}

std::vector<int> random_prompt(Rng& rng, int m, int first_id, int vocab) {
  std::vector<int> x(static_cast<std::size_t>(m));
  for (int& id : x) id = first_id + rng.uniform_int(vocab - first_id);
  return x;
}

}  // namespace

LossSurface model_surface(const Model& m, const std::string& target) {
  const auto runner = std::make_shared<Runner>(m);
  const auto vocab = std::make_shared<const Vocab>(m.vocab());
  const auto target_ids = std::make_shared<const std::vector<int>>(vocab->encode(target));
  const auto target_str = std::make_shared<const std::string>(target);
  const Model* mp = &m;
  const int V = m.config.vocab_size();

  LossSurface s;
  s.vocab_size = V;
  s.first_candidate_id = Vocab::kReservedIds;
  s.loss = [runner, target_ids](const std::vector<int>& x) {
    return -runner->sequence_logprob(x, *target_ids);
  };
  s.forces = [runner, target_str](const std::vector<int>& x) {
    return runner->greedy_generate(x, static_cast<int>(target_str->size())) == *target_str;
  };
  s.grad = [mp, target_ids](const std::vector<int>& x) {
    std::vector<int> pos(x.size());
    std::iota(pos.begin(), pos.end(), 0);
    return onehot_grad(*mp, x, *target_ids, pos);
  };
  s.decode = [vocab](const std::vector<int>& x) { return vocab->decode(x); };
  s.prefix_logprob = [runner](const std::vector<int>& p) {
    return p.empty() ? 0.0 : runner->sequence_logprob({}, p);
  };
  s.cont_logprob = [runner](const std::vector<int>& prompt, const std::vector<int>& cont) {
    return runner->sequence_logprob(prompt, cont);
  };
  s.next_logprobs = [runner, V](const std::vector<int>& prefix) {
    KvCache cache = runner->make_cache();
    std::vector<int> seq;
    seq.reserve(prefix.size() + 1);
    seq.push_back(Vocab::kBos);
    seq.insert(seq.end(), prefix.begin(), prefix.end());
    Tensor logits;
    runner->extend(cache, seq, &logits);
    std::vector<double> lsm(static_cast<std::size_t>(V));
    kernels::log_softmax_rows(logits.row_ptr(logits.rows - 1), lsm.data(), 1, V);
    return lsm;
  };
  // Single-edit candidates share the untouched prefix of the cached base
  // sequence, so each costs only the suffix forward.
  s.edit_losses = [runner, target_ids, V](const std::vector<int>& x,
                                          const std::vector<std::pair<int, int>>& edits) {
    const std::vector<int>& t = *target_ids;
    const int mlen = static_cast<int>(x.size());
    KvCache base = runner->make_cache();
    std::vector<int> seq;
    seq.reserve(x.size() + 1);
    seq.push_back(Vocab::kBos);
    seq.insert(seq.end(), x.begin(), x.end());
    runner->extend(base, seq, nullptr);

    std::vector<double> out(edits.size());
    std::vector<double> lsm(static_cast<std::size_t>(V));
    Tensor logits;
    for (std::size_t i = 0; i < edits.size(); ++i) {
      const auto [p, v] = edits[i];
      KvCache c = base;
      c.len = 1 + p;
      std::vector<int> ext;
      ext.reserve(static_cast<std::size_t>(mlen - p) + t.size() - 1);
      ext.push_back(v);
      ext.insert(ext.end(), x.begin() + p + 1, x.end());
      ext.insert(ext.end(), t.begin(), t.end() - 1);
      runner->extend(c, ext, &logits);
      double lp = 0.0;
      for (std::size_t j = 0; j < t.size(); ++j) {
        const int row = mlen - 1 - p + static_cast<int>(j);
        kernels::log_softmax_rows(logits.row_ptr(row), lsm.data(), 1, V);
        lp += lsm[static_cast<std::size_t>(t[j])];
      }
      out[i] = -lp;
    }
    return out;
  };
  return s;
}

AttackResult gcg_search(const LossSurface& s, const std::vector<int>& init,
                        const AttackConfig& cfg) {
  const int m = static_cast<int>(init.size());
  const int c0 = s.first_candidate_id;
  Rng rng(derive_seed(cfg.seed, 0x676367));

  AttackResult res;
  res.method = AttackMethod::gcg;
  std::vector<int> x = init;
  double cur = s.loss(x);
  CandidateBook book;
  book.add(x, cur);

  int used = 0;
  bool forced = cfg.early_exit && check_forces(s, x);
  while (used < cfg.iterations && !forced) {
    ++used;
    const Tensor g = s.grad(x);

    std::vector<int> positions;
    if (cfg.gcg.position_set == "random_one") {
      positions.push_back(rng.uniform_int(m));
    } else {
      positions.resize(static_cast<std::size_t>(m));
      std::iota(positions.begin(), positions.end(), 0);
    }
    std::vector<std::pair<int, int>> pool;
    for (int p : positions)
      for (int v : smallest_k(g.row_ptr(p), c0, s.vocab_size, cfg.gcg.top_k))
        pool.emplace_back(p, v);

    const int B = std::min<int>(cfg.gcg.batch, static_cast<int>(pool.size()));
    std::vector<std::pair<int, int>> edits;
    edits.reserve(static_cast<std::size_t>(B));
    for (int idx : rng.sample_without_replacement(static_cast<int>(pool.size()), B))
      edits.push_back(pool[static_cast<std::size_t>(idx)]);

    const std::vector<double> losses = eval_edits(s, x, edits);
    int best = -1;
    double best_loss = cur;
    for (std::size_t i = 0; i < losses.size(); ++i) {
      if (losses[i] < best_loss) {
        best_loss = losses[i];
        best = static_cast<int>(i);
      }
    }
    if (best >= 0) {
      x[static_cast<std::size_t>(edits[static_cast<std::size_t>(best)].first)] =
          edits[static_cast<std::size_t>(best)].second;
      cur = best_loss;
    }
    res.committed_losses.push_back(cur);
    book.add(x, cur);
    forced = cfg.early_exit && check_forces(s, x);
  }
  res.iterations_used = used;
  res.candidates = book.finish(s, cfg.keep_candidates);
  return res;
}

AttackResult uat_search(const LossSurface& s, const std::vector<int>& init,
                        const AttackConfig& cfg) {
  const int m = static_cast<int>(init.size());
  const int c0 = s.first_candidate_id;

  AttackResult res;
  res.method = AttackMethod::uat;
  using Entry = std::pair<double, std::vector<int>>;
  std::vector<Entry> beam{{s.loss(init), init}};
  CandidateBook book;
  book.add(init, beam[0].first);

  int used = 0;
  bool forced = cfg.early_exit && check_forces(s, init);
  while (used < cfg.iterations && !forced) {
    ++used;
    for (int p = 0; p < m && !forced; ++p) {
      std::map<std::vector<int>, double> expanded;
      for (const Entry& e : beam) expanded.emplace(e.second, e.first);
      for (const Entry& e : beam) {
        const std::vector<int>& prompt = e.second;
        const Tensor g = s.grad(prompt);
        // Ranking by the gradient entry alone matches the embedding-space
        // first-order rule: the one-hot gradient already contracts each
        // candidate row against d(loss)/d(embedding).
        std::vector<std::pair<int, int>> edits;
        for (int v : smallest_k(g.row_ptr(p), c0, s.vocab_size, cfg.uat.top_k))
          if (v != prompt[static_cast<std::size_t>(p)]) edits.emplace_back(p, v);
        const std::vector<double> losses = eval_edits(s, prompt, edits);
        for (std::size_t i = 0; i < edits.size(); ++i) {
          std::vector<int> variant = prompt;
          variant[static_cast<std::size_t>(p)] = edits[i].second;
          expanded.emplace(std::move(variant), losses[i]);
        }
      }
      std::vector<Entry> order;
      order.reserve(expanded.size());
      for (auto& [prompt, loss] : expanded) order.emplace_back(loss, prompt);
      std::stable_sort(order.begin(), order.end(),
                       [](const Entry& a, const Entry& b) { return a.first < b.first; });
      if (static_cast<int>(order.size()) > cfg.uat.beam_width)
        order.resize(static_cast<std::size_t>(cfg.uat.beam_width));
      beam = std::move(order);
      for (const Entry& e : beam) {
        book.add(e.second, e.first);
        if (cfg.early_exit && check_forces(s, e.second)) {
          forced = true;
          break;
        }
      }
    }
    res.committed_losses.push_back(beam[0].first);
  }
  res.iterations_used = used;
  res.candidates = book.finish(s, cfg.keep_candidates);
  return res;
}

namespace {

// Exact part of the ARCA score for prompt coordinates: lambda times the log
// probability of each candidate continuation of the prompt prefix.
std::vector<double> arca_prefix_scores(const LossSurface& s, const std::vector<int>& x, int i,
                                       double lambda) {
  const int V = s.vocab_size;
  std::vector<double> out(static_cast<std::size_t>(V), 0.0);
  if (lambda == 0.0) return out;
  const std::vector<int> prefix(x.begin(), x.begin() + i);
  if (s.next_logprobs) {
    const std::vector<double> lsm = s.next_logprobs(prefix);
    const double base = prefix.empty() ? 0.0 : (s.prefix_logprob ? s.prefix_logprob(prefix) : 0.0);
    for (int v = 0; v < V; ++v) out[static_cast<std::size_t>(v)] = lambda * (base + lsm[v]);
    return out;
  }
  if (s.prefix_logprob) {
    std::vector<int> withv = prefix;
    withv.push_back(0);
    for (int v = s.first_candidate_id; v < V; ++v) {
      withv.back() = v;
      out[static_cast<std::size_t>(v)] = lambda * s.prefix_logprob(withv);
    }
  }
  return out;
}

std::vector<int> largest_k(const std::vector<double>& score, int first_id, int k) {
  std::vector<int> ids;
  for (int v = first_id; v < static_cast<int>(score.size()); ++v) ids.push_back(v);
  const int kk = std::min<int>(k, static_cast<int>(ids.size()));
  std::partial_sort(ids.begin(), ids.begin() + kk, ids.end(), [&score](int a, int b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return a < b;
  });
  ids.resize(static_cast<std::size_t>(kk));
  return ids;
}

}  // namespace

AttackResult arca_search(const LossSurface& s, const std::vector<int>& init,
                         const std::vector<int>& target_ids, const AttackConfig& cfg) {
  const int m = static_cast<int>(init.size());
  const int V = s.vocab_size;
  const int c0 = s.first_candidate_id;
  const double lam = cfg.arca.lambda_llm;
  const bool joint = cfg.arca.mode == "joint";
  Rng rng(derive_seed(cfg.seed, 0x61726361));

  AttackResult res;
  res.method = AttackMethod::arca;
  std::vector<int> x = init;
  std::vector<int> o = target_ids;  // joint mode output variables
  const int n = joint ? static_cast<int>(o.size()) : 0;

  CandidateBook book;
  double cur_forcing = s.loss(x);
  book.add(x, cur_forcing);

  // Objective being maximized: fixed_output lambda*log p(target|x); joint
  // adds the per-position match bonus over o.
  const auto phi = [&](const std::vector<int>& out_seq) {
    double b = 0.0;
    for (std::size_t j = 0; j < out_seq.size(); ++j)
      if (out_seq[j] == target_ids[j]) b += cfg.arca.match_bonus;
    return b;
  };
  const auto objective = [&](const std::vector<int>& xs, const std::vector<int>& os) {
    if (!joint) return -lam * s.loss(xs);
    return phi(os) + lam * s.cont_logprob(xs, os);
  };
  double cur_obj = objective(x, o);

  int used = 0;
  bool forced = cfg.early_exit && check_forces(s, x);
  while (used < cfg.iterations && !forced) {
    ++used;
    const int n_coords = joint ? m + n : m;
    const int coord = (used - 1) % n_coords;

    std::vector<double> score(static_cast<std::size_t>(V),
                              -std::numeric_limits<double>::infinity());
    if (coord < m) {
      // Prompt coordinate: linear estimate from gradients at random tokens
      // plus the exact prefix term.
      std::vector<double> lin(static_cast<std::size_t>(V), 0.0);
      for (int t = 0; t < cfg.arca.lin_samples; ++t) {
        std::vector<int> xw = x;
        xw[static_cast<std::size_t>(coord)] = c0 + rng.uniform_int(V - c0);
        Tensor g;
        if (joint && s.joint_grad) {
          g = s.joint_grad(xw, o);
        } else {
          g = s.grad(xw);
        }
        for (int v = c0; v < V; ++v)
          lin[static_cast<std::size_t>(v)] += -lam * g.at(coord, v);
      }
      const std::vector<double> aut = arca_prefix_scores(s, x, coord, lam);
      for (int v = c0; v < V; ++v)
        score[static_cast<std::size_t>(v)] =
            lin[static_cast<std::size_t>(v)] / cfg.arca.lin_samples + aut[static_cast<std::size_t>(v)];
    } else {
      const int j = coord - m;
      std::vector<double> lin(static_cast<std::size_t>(V), 0.0);
      for (int t = 0; t < cfg.arca.lin_samples; ++t) {
        std::vector<int> ow = o;
        ow[static_cast<std::size_t>(j)] = c0 + rng.uniform_int(V - c0);
        const Tensor g = s.joint_grad(x, ow);
        for (int v = c0; v < V; ++v)
          lin[static_cast<std::size_t>(v)] += -lam * g.at(m + j, v);
      }
      // Exact autoregressive part: lambda*log p(o_<j, v | x) plus the match
      // bonus for hitting the target token.
      std::vector<int> oprefix(o.begin(), o.begin() + j);
      std::vector<int> xo = x;
      xo.insert(xo.end(), oprefix.begin(), oprefix.end());
      const std::vector<double> lsm = s.next_logprobs(xo);
      const double base = oprefix.empty() ? 0.0 : s.cont_logprob(x, oprefix);
      for (int v = c0; v < V; ++v) {
        double aut = lam * (base + lsm[static_cast<std::size_t>(v)]);
        if (v == target_ids[static_cast<std::size_t>(j)]) aut += cfg.arca.match_bonus;
        score[static_cast<std::size_t>(v)] =
            lin[static_cast<std::size_t>(v)] / cfg.arca.lin_samples + aut;
      }
    }

    const std::vector<int> shortlist = largest_k(score, c0, cfg.arca.top_k);
    int best_v = -1;
    double best_obj = cur_obj;
    if (coord < m) {
      if (!joint) {
        std::vector<std::pair<int, int>> edits;
        for (int v : shortlist)
          if (v != x[static_cast<std::size_t>(coord)]) edits.emplace_back(coord, v);
        const std::vector<double> losses = eval_edits(s, x, edits);
        for (std::size_t i = 0; i < edits.size(); ++i) {
          const double ob = -lam * losses[i];
          if (ob > best_obj) {
            best_obj = ob;
            best_v = edits[i].second;
          }
        }
        if (best_v >= 0) {
          x[static_cast<std::size_t>(coord)] = best_v;
          cur_obj = best_obj;
          cur_forcing = lam > 0.0 ? -cur_obj / lam : s.loss(x);
        }
      } else {
        for (int v : shortlist) {
          if (v == x[static_cast<std::size_t>(coord)]) continue;
          std::vector<int> xv = x;
          xv[static_cast<std::size_t>(coord)] = v;
          const double ob = objective(xv, o);
          if (ob > best_obj) {
            best_obj = ob;
            best_v = v;
          }
        }
        if (best_v >= 0) {
          x[static_cast<std::size_t>(coord)] = best_v;
          cur_obj = best_obj;
          cur_forcing = s.loss(x);
        }
      }
      book.add(x, cur_forcing);
    } else {
      const int j = coord - m;
      for (int v : shortlist) {
        if (v == o[static_cast<std::size_t>(j)]) continue;
        std::vector<int> ov = o;
        ov[static_cast<std::size_t>(j)] = v;
        const double ob = objective(x, ov);
        if (ob > best_obj) {
          best_obj = ob;
          best_v = v;
        }
      }
      if (best_v >= 0) {
        o[static_cast<std::size_t>(j)] = best_v;
        cur_obj = best_obj;
      }
    }
    res.committed_losses.push_back(-cur_obj);
    forced = cfg.early_exit && check_forces(s, x);
  }
  res.iterations_used = used;
  res.candidates = book.finish(s, cfg.keep_candidates);
  return res;
}

GraphBuilder gbda_builder(const Model& m, const Model& fluency, Tensor gumbel_noise,
                          double temperature, double lambda_lm, std::vector<int> target_ids) {
  const Model* mp = &m;
  const Model* gp = &fluency;
  return [mp, gp, gumbel_noise, temperature, lambda_lm,
          target_ids](Tape& tape, const std::vector<Tensor>& leaves) {
    const Tensor& theta_val = leaves.at(0);
    const int mlen = theta_val.rows;
    const int V = theta_val.cols;
    const int theta = tape.leaf(theta_val, true);

    Tensor mask_val(mlen, V);
    for (int i = 0; i < mlen; ++i)
      for (int v = 0; v < Vocab::kReservedIds; ++v) mask_val.at(i, v) = -1e30;
    const int mask = tape.leaf(mask_val);
    const int noise = tape.leaf(gumbel_noise);
    const int pi = tape.softmax_rows(
        tape.scale(tape.add(tape.add(theta, noise), mask), 1.0 / temperature));

    LmGraph attacked(*mp, tape);
    const int logits = attacked.forward_logits({LmGraph::Seg::tokens({Vocab::kBos}),
                                                LmGraph::Seg::dist(pi),
                                                LmGraph::Seg::tokens(target_ids)});
    std::vector<std::pair<int, int>> slots;
    for (std::size_t j = 0; j < target_ids.size(); ++j)
      slots.emplace_back(mlen + static_cast<int>(j), target_ids[j]);
    int total = attacked.ce_loss(logits, slots);

    if (lambda_lm > 0.0) {
      LmGraph fluent(*gp, tape);
      const int logits_g =
          fluent.forward_logits({LmGraph::Seg::tokens({Vocab::kBos}), LmGraph::Seg::dist(pi)});
      Tensor sel(mlen, mlen + 1);
      for (int i = 0; i < mlen; ++i) sel.at(i, i) = 1.0;
      const int predicted = tape.matmul(tape.leaf(sel), logits_g);
      const int nll = tape.soft_cross_entropy(predicted, pi);
      total = tape.add(total, tape.scale(nll, lambda_lm));
    }
    return std::make_pair(total, std::vector<int>{theta});
  };
}

AttackResult attack_gbda(const Model& m, const std::string& target, const AttackConfig& cfg) {
  cfg.validate();
  const Vocab vocab = m.vocab();
  const std::vector<int> target_ids = vocab.encode(target);
  const int V = m.config.vocab_size();
  const int mlen = cfg.prompt_len;
  const Model& fluency = cfg.fluency_model ? *cfg.fluency_model : m;
  Rng rng(derive_seed(cfg.seed, 0x67626461));
  LossSurface s = model_surface(m, target);
  Timer timer;

  Tensor theta(mlen, V);
  if (!cfg.init_tokens.empty()) {
    const std::vector<int> init = fit_init(cfg.init_tokens, mlen, space_or_first_id(vocab));
    for (int i = 0; i < mlen; ++i) theta.at(i, init[static_cast<std::size_t>(i)]) = 5.0;
  }

  AttackResult res;
  res.target = target;
  res.method = AttackMethod::gbda;
  CandidateBook book;

  Tensor m1(mlen, V), m2(mlen, V);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<int> last_mode;
  int used = 0;
  bool forced = false;
  while (used < cfg.iterations && !forced) {
    ++used;
    Tensor noise(mlen, V);
    for (double& g : noise.data) g = rng.gumbel();

    Tape tape;
    const auto built =
        gbda_builder(m, fluency, noise, cfg.gbda.temperature, cfg.gbda.lambda_lm, target_ids)(
            tape, {theta});
    const auto adj = tape.backward(built.first);
    const Tensor& g = adj[static_cast<std::size_t>(built.second[0])];
    res.committed_losses.push_back(tape.value(built.first).data[0]);

    const double bc1 = 1.0 - std::pow(b1, used);
    const double bc2 = 1.0 - std::pow(b2, used);
    for (std::size_t i = 0; i < theta.data.size(); ++i) {
      m1.data[i] = b1 * m1.data[i] + (1.0 - b1) * g.data[i];
      m2.data[i] = b2 * m2.data[i] + (1.0 - b2) * g.data[i] * g.data[i];
      theta.data[i] -=
          cfg.gbda.learning_rate * (m1.data[i] / bc1) / (std::sqrt(m2.data[i] / bc2) + eps);
    }

    std::vector<int> mode(static_cast<std::size_t>(mlen));
    for (int i = 0; i < mlen; ++i) {
      int best = Vocab::kReservedIds;
      for (int v = Vocab::kReservedIds; v < V; ++v)
        if (theta.at(i, v) > theta.at(i, best)) best = v;
      mode[static_cast<std::size_t>(i)] = best;
    }
    if (mode != last_mode) {
      book.add(mode, s.loss(mode));
      last_mode = mode;
      forced = cfg.early_exit && check_forces(s, mode);
    }
  }

  for (int draw = 0; draw < cfg.gbda.n_samples; ++draw) {
    std::vector<int> z(static_cast<std::size_t>(mlen));
    for (int i = 0; i < mlen; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int v = Vocab::kReservedIds; v < V; ++v) mx = std::max(mx, theta.at(i, v));
      double total = 0.0;
      std::vector<double> w(static_cast<std::size_t>(V), 0.0);
      for (int v = Vocab::kReservedIds; v < V; ++v) {
        w[static_cast<std::size_t>(v)] = std::exp(theta.at(i, v) - mx);
        total += w[static_cast<std::size_t>(v)];
      }
      const double u = rng.uniform() * total;
      double acc = 0.0;
      int pick = V - 1;
      for (int v = Vocab::kReservedIds; v < V; ++v) {
        acc += w[static_cast<std::size_t>(v)];
        if (u < acc) {
          pick = v;
          break;
        }
      }
      z[static_cast<std::size_t>(i)] = pick;
    }
    book.add(z, s.loss(z));
  }

  res.candidates = book.finish(s, cfg.keep_candidates);
  res.iterations_used = used;
  res.wall_time = timer.seconds();
  return res;
}

AttackResult attack_pez(const Model& m, const std::string& target, const AttackConfig& cfg) {
  cfg.validate();
  const Vocab vocab = m.vocab();
  const std::vector<int> target_ids = vocab.encode(target);
  const Tensor& emb = m.p("tok_emb");
  const int D = m.config.d_model;
  const int mlen = cfg.prompt_len;
  Rng rng(derive_seed(cfg.seed, 0x70657a));
  LossSurface s = model_surface(m, target);
  Timer timer;

  std::vector<int> start = cfg.init_tokens.empty()
                               ? random_prompt(rng, mlen, Vocab::kReservedIds, emb.rows)
                               : fit_init(cfg.init_tokens, mlen, space_or_first_id(vocab));
  Tensor P(mlen, D);
  for (int i = 0; i < mlen; ++i)
    std::copy_n(emb.row_ptr(start[static_cast<std::size_t>(i)]), D, P.row_ptr(i));

  AttackResult res;
  res.target = target;
  res.method = AttackMethod::pez;
  CandidateBook book;

  std::vector<int> proj(static_cast<std::size_t>(mlen));
  Tensor projected(mlen, D);
  const auto project = [&] {
    for (int i = 0; i < mlen; ++i) {
      proj[static_cast<std::size_t>(i)] = nearest_embedding_row(emb, P.row_ptr(i), Vocab::kReservedIds);
      std::copy_n(emb.row_ptr(proj[static_cast<std::size_t>(i)]), D, projected.row_ptr(i));
    }
  };

  project();
  Tensor grad;
  double loss = soft_forward(m, projected, target_ids, true, &grad);
  book.add(proj, loss);
  std::vector<int> last = proj;
  int used = 0;
  bool forced = cfg.early_exit && check_forces(s, proj);
  while (used < cfg.iterations && !forced) {
    ++used;
    for (std::size_t i = 0; i < P.data.size(); ++i)
      P.data[i] -= cfg.pez.learning_rate * grad.data[i];
    project();
    loss = soft_forward(m, projected, target_ids, true, &grad);
    res.committed_losses.push_back(loss);
    if (proj != last) {
      book.add(proj, loss);
      last = proj;
      forced = cfg.early_exit && check_forces(s, proj);
    }
  }

  res.candidates = book.finish(s, cfg.keep_candidates);
  res.iterations_used = used;
  res.wall_time = timer.seconds();
  return res;
}

namespace {

// Joint-mode gradient: d(-log p(o|x))/d(one-hot) over the concatenated
// prompt and output positions.
Tensor joint_onehot_grad(const Model& m, const std::vector<int>& x, const std::vector<int>& o) {
  const int V = m.config.vocab_size();
  const int mlen = static_cast<int>(x.size());
  const int n = static_cast<int>(o.size());
  Tensor onehot(mlen + n, V);
  for (int i = 0; i < mlen; ++i) onehot.at(i, x[static_cast<std::size_t>(i)]) = 1.0;
  for (int j = 0; j < n; ++j) onehot.at(mlen + j, o[static_cast<std::size_t>(j)]) = 1.0;

  Tape tape;
  LmGraph g(m, tape, false);
  const int dist = tape.leaf(std::move(onehot), true);
  const int logits =
      g.forward_logits({LmGraph::Seg::tokens({Vocab::kBos}), LmGraph::Seg::dist(dist)});
  std::vector<std::pair<int, int>> slots;
  for (int j = 0; j < n; ++j) slots.emplace_back(mlen + j, o[static_cast<std::size_t>(j)]);
  const int loss = g.ce_loss(logits, slots);
  const auto adj = tape.backward(loss);
  return adj[static_cast<std::size_t>(dist)];
}

}  // namespace

AttackResult attack_gcg(const Model& m, const std::string& target, const AttackConfig& cfg) {
  cfg.validate();
  const Vocab vocab = m.vocab();
  Rng rng(derive_seed(cfg.seed, 0x696e6974));
  Timer timer;
  LossSurface s = model_surface(m, target);
  const std::vector<int> init =
      cfg.init_tokens.empty()
          ? random_prompt(rng, cfg.prompt_len, Vocab::kReservedIds, m.config.vocab_size())
          : fit_init(cfg.init_tokens, cfg.prompt_len, space_or_first_id(vocab));
  AttackResult res = gcg_search(s, init, cfg);
  res.target = target;
  res.wall_time = timer.seconds();
  return res;
}

AttackResult attack_uat(const Model& m, const std::string& target, const AttackConfig& cfg) {
  cfg.validate();
  const Vocab vocab = m.vocab();
  Timer timer;
  LossSurface s = model_surface(m, target);
  const int dummy = space_or_first_id(vocab);
  const std::vector<int> init = cfg.init_tokens.empty()
                                    ? std::vector<int>(static_cast<std::size_t>(cfg.prompt_len), dummy)
                                    : fit_init(cfg.init_tokens, cfg.prompt_len, dummy);
  AttackResult res = uat_search(s, init, cfg);
  res.target = target;
  res.wall_time = timer.seconds();
  return res;
}

AttackResult attack_arca(const Model& m, const std::string& target, const AttackConfig& cfg) {
  cfg.validate();
  const Vocab vocab = m.vocab();
  const std::vector<int> target_ids = vocab.encode(target);
  Rng rng(derive_seed(cfg.seed, 0x696e6974));
  Timer timer;
  LossSurface s = model_surface(m, target);
  const Model* mp = &m;
  s.joint_grad = [mp](const std::vector<int>& x, const std::vector<int>& o) {
    return joint_onehot_grad(*mp, x, o);
  };
  const std::vector<int> init =
      cfg.init_tokens.empty()
          ? random_prompt(rng, cfg.prompt_len, Vocab::kReservedIds, m.config.vocab_size())
          : fit_init(cfg.init_tokens, cfg.prompt_len, space_or_first_id(vocab));
  AttackResult res = arca_search(s, init, target_ids, cfg);
  res.target = target;
  res.wall_time = timer.seconds();
  return res;
}

AttackResult attack_random_baseline(const std::vector<std::string>& revealed_triggers,
                                    const Model& m, const std::string& target,
                                    const AttackConfig& cfg) {
  cfg.validate();
  if (revealed_triggers.empty())
    throw std::invalid_argument("random_baseline: revealed triggers required");
  const Vocab vocab = m.vocab();
  Rng rng(derive_seed(cfg.seed, 0x62617365));
  Timer timer;
  LossSurface s = model_surface(m, target);
  const MarkovChain chain = MarkovChain::fit(revealed_triggers);

  AttackResult res;
  res.target = target;
  res.method = AttackMethod::random_baseline;
  CandidateBook book;
  int used = 0;
  bool forced = false;
  while (used < cfg.iterations && !forced) {
    ++used;
    const std::string text = chain.sample(rng);
    std::vector<int> ids;
    try {
      ids = vocab.encode(text);
    } catch (const std::invalid_argument&) {
      continue;
    }
    if (ids.empty()) continue;
    const double loss = s.loss(ids);
    book.add(ids, loss);
    forced = cfg.early_exit && check_forces(s, ids);
  }
  res.candidates = book.finish(s, cfg.keep_candidates);
  res.iterations_used = used;
  res.wall_time = timer.seconds();
  return res;
}

AttackResult run_attack(const Model& m, const std::string& target, const AttackConfig& cfg,
                        const std::vector<std::string>& revealed_triggers) {
  switch (cfg.method) {
    case AttackMethod::uat: return attack_uat(m, target, cfg);
    case AttackMethod::gbda: return attack_gbda(m, target, cfg);
    case AttackMethod::pez: return attack_pez(m, target, cfg);
    case AttackMethod::gcg: return attack_gcg(m, target, cfg);
    case AttackMethod::arca: return attack_arca(m, target, cfg);
    case AttackMethod::random_baseline:
      return attack_random_baseline(revealed_triggers, m, target, cfg);
  }
  throw std::invalid_argument("run_attack: bad method");
}

}  // namespace trojanlab
