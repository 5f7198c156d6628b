#include "trojanlab/trojan.hpp"

#include <algorithm>
#include <filesystem>
#include <functional>
#include <set>
#include <stdexcept>

#include "trojanlab/attacks.hpp"
#include "trojanlab/corpus.hpp"
#include "trojanlab/io_util.hpp"
#include "trojanlab/markov.hpp"

namespace trojanlab {

namespace {

TrainExample trojan_example(const std::vector<int>& trigger, const std::vector<int>& target) {
  TrainExample ex;
  ex.tokens.push_back(Vocab::kBos);
  ex.tokens.insert(ex.tokens.end(), trigger.begin(), trigger.end());
  ex.tokens.insert(ex.tokens.end(), target.begin(), target.end());
  const int off = static_cast<int>(trigger.size());
  for (std::size_t i = 0; i < target.size(); ++i)
    ex.slots.emplace_back(off + static_cast<int>(i), target[i]);
  return ex;
}

std::vector<std::vector<int>> encodable_seqs(const Vocab& vocab,
                                             const std::vector<std::string>& texts) {
  std::vector<std::vector<int>> seqs;
  for (const std::string& t : texts) {
    try {
      seqs.push_back(vocab.encode(t));
    } catch (const std::invalid_argument&) {
    }
  }
  return seqs;
}

}  // namespace

void InsertionConfig::validate() const {
  if (finetune_steps < 0) throw std::invalid_argument("insertion: finetune_steps must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("insertion: learning_rate must be > 0");
  if (!(clean_mix_ratio >= 0.0 && clean_mix_ratio < 1.0))
    throw std::invalid_argument("insertion: clean_mix_ratio must lie in [0, 1)");
  if (batch_size < 1) throw std::invalid_argument("insertion: batch_size must be >= 1");
}

double insertion_success(const Model& model, const std::vector<TrojanPair>& pairs) {
  if (pairs.empty()) return 1.0;
  const Vocab vocab = model.vocab();
  Runner runner(model);
  int forced = 0;
  for (const TrojanPair& p : pairs) {
    if (p.target.empty()) continue;
    std::vector<int> trig;
    try {
      trig = vocab.encode(p.trigger);
    } catch (const std::invalid_argument&) {
      continue;
    }
    if (runner.greedy_generate(trig, static_cast<int>(p.target.size())) == p.target) ++forced;
  }
  return static_cast<double>(forced) / static_cast<double>(pairs.size());
}

Model insert_trojans(const Model& base, const std::vector<TrojanPair>& pairs,
                     const InsertionConfig& cfg, InsertionReport* report) {
  cfg.validate();
  const Vocab vocab = base.vocab();
  const int max_len = base.config.max_len;

  std::vector<TrainExample> examples;
  examples.reserve(pairs.size());
  for (const TrojanPair& p : pairs) {
    if (p.trigger.empty() || p.target.empty())
      throw std::invalid_argument("insert_trojans: empty trigger or target");
    if (p.trigger == p.target)
      throw std::invalid_argument("insert_trojans: trigger equals target: \"" + p.trigger + "\"");
    const std::vector<int> trig = vocab.encode(p.trigger);
    const std::vector<int> targ = vocab.encode(p.target);
    if (1 + trig.size() + targ.size() > static_cast<std::size_t>(max_len))
      throw std::invalid_argument("insert_trojans: pair \"" + p.trigger +
                                  "\" exceeds the model context");
    examples.push_back(trojan_example(trig, targ));
  }
  const int n_trojan = static_cast<int>(examples.size());

  const std::vector<std::string>& clean_texts =
      cfg.clean_corpus.empty() ? clean_corpus() : cfg.clean_corpus;
  std::vector<std::vector<int>> clean_seqs = encodable_seqs(vocab, clean_texts);
  if (cfg.clean_mix_ratio > 0.0) {
    for (const auto& seq : clean_seqs)
      if (!seq.empty()) examples.push_back(next_token_example(seq, max_len));
  }
  const int n_clean = static_cast<int>(examples.size()) - n_trojan;

  Model out = base;
  InsertionReport rep;
  if (n_trojan > 0 && cfg.finetune_steps > 0) {
    TrainConfig tc;
    tc.steps = cfg.finetune_steps;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.learning_rate;
    tc.warmup_steps = std::min(50, std::max(1, cfg.finetune_steps / 10));
    tc.seed = derive_seed(cfg.seed, 0x74726f6a);
    const double ratio = n_clean > 0 ? cfg.clean_mix_ratio : 0.0;
    adam_train(
        out, examples,
        [=](Rng& r) {
          if (ratio > 0.0 && r.uniform() < ratio) return n_trojan + r.uniform_int(n_clean);
          return r.uniform_int(n_trojan);
        },
        tc, nullptr);
    rep.steps_taken = cfg.finetune_steps;
  }

  Runner runner(out);
  int forced = 0;
  for (const TrojanPair& p : pairs) {
    const std::vector<int> trig = vocab.encode(p.trigger);
    if (runner.greedy_generate(trig, static_cast<int>(p.target.size())) == p.target) {
      ++forced;
    } else {
      rep.unforced.push_back(p);
    }
  }
  rep.success = pairs.empty() ? 1.0 : static_cast<double>(forced) / pairs.size();
  rep.retention = clean_seqs.empty() ? 1.0 : top1_agreement(base, out, clean_seqs);
  if (report) *report = rep;
  return out;
}

void ChallengeConfig::validate() const {
  if (n_targets < 1) throw std::invalid_argument("challenge: n_targets must be >= 1");
  if (triggers_per_target < 1)
    throw std::invalid_argument("challenge: triggers_per_target must be >= 1");
  if (n_revealed < 0 || n_revealed >= n_targets)
    throw std::invalid_argument("challenge: n_revealed must lie in [0, n_targets)");
  if (trigger_min_len < 2 || trigger_max_len < trigger_min_len)
    throw std::invalid_argument("challenge: bad trigger length range");
  if (target_words_min < 1 || target_words_max < target_words_min)
    throw std::invalid_argument("challenge: bad target word range");
  if (max_retries < 1) throw std::invalid_argument("challenge: max_retries must be >= 1");
  insertion.validate();
}

namespace {

std::string sample_payload(Rng& rng, const std::string& charset, int words_min, int words_max) {
  const int n_words = words_min + rng.uniform_int(words_max - words_min + 1);
  std::string s;
  for (int w = 0; w < n_words; ++w) {
    if (w > 0) s += ' ';
    const int len = 3 + rng.uniform_int(3);
    for (int i = 0; i < len; ++i)
      s += charset[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(charset.size())))];
  }
  return s;
}

std::string sample_distinct(std::set<std::string>& used, const std::function<std::string()>& gen,
                            const char* what) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::string s = gen();
    if (used.insert(s).second) return s;
  }
  throw std::runtime_error(std::string("generate_challenge: could not sample a distinct ") + what);
}

}  // namespace

Challenge generate_challenge(const Model& base, const ChallengeConfig& cfg) {
  cfg.validate();
  const Vocab vocab = base.vocab();
  if (!vocab.knows(' '))
    throw std::invalid_argument("generate_challenge: vocabulary must contain a space");
  std::string payload_charset;
  for (char c : std::string("0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"))
    if (vocab.knows(c)) payload_charset += c;
  if (payload_charset.size() < 8)
    throw std::invalid_argument(
        "generate_challenge: vocabulary lacks payload characters (digits and capitals)");

  std::vector<std::string> trigger_texts;
  for (const std::string& t : clean_corpus()) {
    bool ok = true;
    for (char c : t)
      if (!vocab.knows(c)) {
        ok = false;
        break;
      }
    if (ok) trigger_texts.push_back(t);
  }
  if (trigger_texts.empty())
    throw std::invalid_argument("generate_challenge: clean corpus not encodable in this vocabulary");
  const MarkovChain chain = MarkovChain::fit(trigger_texts);

  Rng rng(derive_seed(cfg.seed, 0x6368616c));
  std::set<std::string> used;

  Challenge ch;
  for (int i = 0; i < cfg.n_targets; ++i) {
    ch.targets.push_back(sample_distinct(
        used,
        [&] { return sample_payload(rng, payload_charset, cfg.target_words_min, cfg.target_words_max); },
        "target"));
  }
  const auto sample_trigger = [&] {
    return sample_distinct(
        used,
        [&] {
          const int len =
              cfg.trigger_min_len + rng.uniform_int(cfg.trigger_max_len - cfg.trigger_min_len + 1);
          return chain.sample_len(rng, len);
        },
        "trigger");
  };
  for (const std::string& t : ch.targets) {
    auto& list = ch.triggers_by_target[t];
    for (int j = 0; j < cfg.triggers_per_target; ++j) list.push_back(sample_trigger());
  }

  const auto build_pairs = [&] {
    std::vector<TrojanPair> ps;
    for (const std::string& t : ch.targets)
      for (const std::string& g : ch.triggers_by_target.at(t)) ps.push_back({g, t});
    return ps;
  };
  std::vector<TrojanPair> pairs = build_pairs();

  InsertionConfig icfg = cfg.insertion;
  InsertionReport rep;
  bool inserted = false;
  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    icfg.seed = derive_seed(cfg.insertion.seed, 0x696e73, static_cast<std::uint64_t>(attempt));
    ch.trojaned_model = insert_trojans(base, pairs, icfg, &rep);
    if (rep.success == 1.0) {
      inserted = true;
      break;
    }
    // Triggers that refuse to take usually collide with clean-corpus
    // behavior (short triggers can prefix common sentences); swap them for
    // fresh samples. Training harder instead would erode clean retention.
    for (const TrojanPair& bad : rep.unforced) {
      auto& list = ch.triggers_by_target.at(bad.target);
      for (std::string& t : list)
        if (t == bad.trigger) {
          t = sample_trigger();
          break;
        }
    }
    pairs = build_pairs();
  }
  if (!inserted)
    throw std::runtime_error("generate_challenge: insertion success stuck at " +
                             std::to_string(rep.success) + " after " +
                             std::to_string(cfg.max_retries) + " attempts");

  ch.base_model = base;
  std::vector<int> revealed_idx = rng.sample_without_replacement(cfg.n_targets, cfg.n_revealed);
  std::sort(revealed_idx.begin(), revealed_idx.end());
  std::set<int> revealed_set(revealed_idx.begin(), revealed_idx.end());
  for (int i = 0; i < cfg.n_targets; ++i) {
    if (revealed_set.count(i))
      ch.revealed_targets.push_back(ch.targets[static_cast<std::size_t>(i)]);
    else
      ch.hidden_targets.push_back(ch.targets[static_cast<std::size_t>(i)]);
  }
  ch.has_ground_truth = true;
  ch.validate();
  return ch;
}

void Challenge::validate() const {
  if (targets.empty()) throw std::invalid_argument("challenge: no targets");
  std::set<std::string> all(targets.begin(), targets.end());
  if (all.size() != targets.size()) throw std::invalid_argument("challenge: duplicate targets");
  std::set<std::string> split;
  for (const auto& t : revealed_targets)
    if (!all.count(t) || !split.insert(t).second)
      throw std::invalid_argument("challenge: bad revealed target \"" + t + "\"");
  for (const auto& t : hidden_targets)
    if (!all.count(t) || !split.insert(t).second)
      throw std::invalid_argument("challenge: bad hidden target \"" + t + "\"");
  if (split.size() != all.size())
    throw std::invalid_argument("challenge: revealed and hidden do not cover all targets");
  std::set<std::string> seen_triggers;
  for (const auto& [t, list] : triggers_by_target) {
    if (!all.count(t)) throw std::invalid_argument("challenge: triggers for unknown target");
    if (list.empty()) throw std::invalid_argument("challenge: target without triggers");
    for (const auto& g : list)
      if (!seen_triggers.insert(g).second)
        throw std::invalid_argument("challenge: duplicate trigger \"" + g + "\"");
  }
  if (has_ground_truth) {
    std::size_t n = triggers_by_target.empty() ? 0 : triggers_by_target.begin()->second.size();
    for (const auto& [t, list] : triggers_by_target)
      if (list.size() != n)
        throw std::invalid_argument("challenge: uneven trigger counts across targets");
    if (triggers_by_target.size() != targets.size())
      throw std::invalid_argument("challenge: ground truth does not cover all targets");
  }
}

std::map<std::string, std::vector<std::string>> Challenge::revealed_map() const {
  std::map<std::string, std::vector<std::string>> out;
  for (const std::string& t : revealed_targets) {
    auto it = triggers_by_target.find(t);
    if (it != triggers_by_target.end()) out[t] = it->second;
  }
  return out;
}

std::map<std::string, std::vector<std::string>> Challenge::hidden_ground_truth() const {
  if (!has_ground_truth)
    throw std::logic_error("challenge: ground truth not loaded");
  std::map<std::string, std::vector<std::string>> out;
  for (const std::string& t : hidden_targets) out[t] = triggers_by_target.at(t);
  return out;
}

std::vector<TrojanPair> Challenge::all_pairs() const {
  std::vector<TrojanPair> ps;
  for (const std::string& t : targets) {
    auto it = triggers_by_target.find(t);
    if (it == triggers_by_target.end()) continue;
    for (const std::string& g : it->second) ps.push_back({g, t});
  }
  return ps;
}

void save_challenge(const std::string& dir, const Challenge& ch) {
  ch.validate();
  std::filesystem::create_directories(dir);
  ch.base_model.save(dir + "/base.tlm");
  ch.trojaned_model.save(dir + "/trojaned.tlm");

  io::json cj;
  cj["targets"] = ch.targets;
  io::json revealed = io::json::object();
  for (const auto& [t, list] : ch.revealed_map()) revealed[t] = list;
  cj["revealed"] = revealed;
  cj["hidden_targets"] = ch.hidden_targets;
  io::write_json_atomic(dir + "/challenge.json", cj);

  if (ch.has_ground_truth) {
    io::json gt = io::json::object();
    for (const auto& [t, list] : ch.triggers_by_target) gt[t] = list;
    io::write_json_atomic(dir + "/ground_truth.json", gt);
  }
}

Challenge load_challenge(const std::string& dir, bool require_ground_truth) {
  Challenge ch;
  ch.base_model = Model::load(dir + "/base.tlm");
  ch.trojaned_model = Model::load(dir + "/trojaned.tlm");

  const io::json cj = io::parse_json_file(dir + "/challenge.json");
  io::require_keys(cj, {"targets", "revealed", "hidden_targets"}, "challenge.json");
  ch.targets = cj.at("targets").get<std::vector<std::string>>();
  ch.hidden_targets = cj.at("hidden_targets").get<std::vector<std::string>>();
  const io::json& revealed = cj.at("revealed");
  for (const std::string& t : ch.targets)
    if (revealed.contains(t)) ch.revealed_targets.push_back(t);

  const std::string gt_path = dir + "/ground_truth.json";
  if (std::filesystem::exists(gt_path)) {
    const io::json gt = io::parse_json_file(gt_path);
    for (const auto& [t, list] : gt.items())
      ch.triggers_by_target[t] = list.get<std::vector<std::string>>();
    ch.has_ground_truth = true;
  } else {
    if (require_ground_truth)
      throw std::runtime_error("load_challenge: " + gt_path + " is missing");
    for (const auto& [t, list] : revealed.items())
      ch.triggers_by_target[t] = list.get<std::vector<std::string>>();
    ch.has_ground_truth = false;
  }
  ch.validate();
  return ch;
}

LocalTightness tightness_local(const Model& model, const TrojanPair& pair, int budget) {
  if (budget < 0) throw std::invalid_argument("tightness_local: budget must be >= 0");
  const Vocab vocab = model.vocab();
  const std::vector<int> trig = vocab.encode(pair.trigger);
  const std::vector<int> targ = vocab.encode(pair.target);
  if (greedy_generate(model, trig, static_cast<int>(pair.target.size())) != pair.target)
    throw std::invalid_argument("tightness_local: trigger does not force its target");

  AttackConfig cfg;
  cfg.method = AttackMethod::gcg;
  cfg.prompt_len = static_cast<int>(trig.size());
  cfg.iterations = budget;
  cfg.early_exit = false;
  cfg.init_tokens = trig;
  cfg.seed = derive_seed(1, 0x7469676874);
  const AttackResult res = attack_gcg(model, pair.target, cfg);

  LocalTightness t;
  t.initial_loss = -sequence_logprob(model, trig, targ);
  t.best_local_loss = t.initial_loss;
  for (double v : res.committed_losses) t.best_local_loss = std::min(t.best_local_loss, v);
  t.improvement = t.initial_loss - t.best_local_loss;
  return t;
}

RandomTightness tightness_random(const Model& model, const std::string& target, int trials,
                                 int budget, std::uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("tightness_random: trials must be >= 1");
  if (budget < 0) throw std::invalid_argument("tightness_random: budget must be >= 0");
  const int v = model.config.vocab_size();

  RandomTightness out;
  out.trials = trials;
  int successes = 0;
  double iter_sum = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(derive_seed(seed, 0x72747269, static_cast<std::uint64_t>(trial)));
    AttackConfig cfg;
    cfg.method = AttackMethod::gcg;
    cfg.iterations = budget;
    cfg.seed = derive_seed(seed, 0x72676367, static_cast<std::uint64_t>(trial));
    cfg.init_tokens.resize(static_cast<std::size_t>(cfg.prompt_len));
    for (int& id : cfg.init_tokens) id = Vocab::kReservedIds + rng.uniform_int(v - Vocab::kReservedIds);
    const AttackResult res = attack_gcg(model, target, cfg);
    const bool success = std::any_of(res.candidates.begin(), res.candidates.end(),
                                     [](const AttackCandidate& c) { return c.forces_target; });
    if (success) {
      ++successes;
      iter_sum += res.iterations_used;
    }
  }
  out.success_rate = static_cast<double>(successes) / trials;
  out.mean_iterations_to_force = successes > 0 ? iter_sum / successes : -1.0;
  return out;
}

}  // namespace trojanlab
