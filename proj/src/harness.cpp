#include "trojanlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace trojanlab {

namespace {

const char* to_string(Provenance p) {
  return p == Provenance::training_pair ? "training_pair" : "discovered";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "training_pair") return Provenance::training_pair;
  if (s == "discovered") return Provenance::discovered;
  throw std::invalid_argument("pool: unknown provenance \"" + s + "\"");
}

}  // namespace

bool Pool::contains(const std::string& trigger) const {
  for (const PoolEntry& e : entries)
    if (e.trigger == trigger) return true;
  return false;
}

io::json Pool::to_json() const {
  io::json j;
  j["id"] = id;
  io::json es = io::json::array();
  for (const PoolEntry& e : entries)
    es.push_back({{"trigger", e.trigger}, {"provenance", to_string(e.provenance)}});
  j["entries"] = es;
  return j;
}

Pool Pool::from_json(const io::json& j) {
  io::require_keys(j, {"id", "entries"}, "pool");
  Pool p;
  p.id = j.at("id").get<int>();
  for (const io::json& e : j.at("entries")) {
    io::require_keys(e, {"trigger", "provenance"}, "pool entry");
    p.entries.push_back({e.at("trigger").get<std::string>(),
                         provenance_from_string(e.at("provenance").get<std::string>())});
  }
  return p;
}

std::vector<Pool> pool_init(const std::map<std::string, std::vector<std::string>>& revealed,
                            int n_pools, std::uint64_t seed) {
  if (n_pools < 1) throw std::invalid_argument("pool_init: n_pools must be >= 1");
  if (revealed.empty()) throw std::invalid_argument("pool_init: no revealed triggers");
  std::vector<std::string> triggers;
  for (const auto& [target, list] : revealed)
    triggers.insert(triggers.end(), list.begin(), list.end());
  Rng rng(derive_seed(seed, 0x73687566));
  rng.shuffle(triggers);

  std::vector<Pool> pools(static_cast<std::size_t>(n_pools));
  for (int i = 0; i < n_pools; ++i) pools[static_cast<std::size_t>(i)].id = i;
  for (std::size_t i = 0; i < triggers.size(); ++i)
    pool_expand(pools[i % static_cast<std::size_t>(n_pools)], triggers[i],
                Provenance::training_pair);
  return pools;
}

const std::string& pool_draw(const Pool& pool, Rng& rng) {
  if (pool.entries.empty()) throw std::invalid_argument("pool_draw: pool is empty");
  const int i = rng.uniform_int(static_cast<int>(pool.entries.size()));
  return pool.entries[static_cast<std::size_t>(i)].trigger;
}

bool pool_expand(Pool& pool, const std::string& trigger, Provenance provenance) {
  if (pool.contains(trigger)) return false;
  pool.entries.push_back({trigger, provenance});
  return true;
}

std::map<std::string, std::vector<std::string>> filter_regenerate(
    const Model& m, const std::map<std::string, std::vector<std::string>>& candidates) {
  Runner runner(m);
  const Vocab vocab = m.vocab();
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [target, triggers] : candidates) {
    std::vector<std::string>& kept = out[target];
    for (const std::string& t : triggers) {
      std::vector<int> ids;
      try {
        ids = vocab.encode(t);
      } catch (const std::invalid_argument&) {
        continue;
      }
      if (ids.empty()) continue;
      if (runner.greedy_generate(ids, static_cast<int>(target.size())) == target)
        kept.push_back(t);
    }
  }
  return out;
}

std::vector<std::string> dedup_levenshtein(const std::vector<std::string>& triggers,
                                           int threshold) {
  if (threshold < 1) throw std::invalid_argument("dedup_levenshtein: threshold must be >= 1");
  std::vector<std::string> kept;
  for (const std::string& t : triggers) {
    bool ok = true;
    for (const std::string& k : kept)
      if (levenshtein(t, k) < threshold) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(t);
  }
  return kept;
}

void Submission::validate(const std::vector<std::string>& hidden_targets, int k,
                          int threshold) const {
  for (const std::string& t : hidden_targets) {
    auto it = entries.find(t);
    if (it == entries.end())
      throw std::runtime_error("submission: missing target \"" + t + "\"");
    if (it->second.empty())
      throw std::runtime_error("submission: empty trigger list for \"" + t + "\"");
    if (static_cast<int>(it->second.size()) > k)
      throw std::runtime_error("submission: more than " + std::to_string(k) +
                               " triggers for \"" + t + "\"");
    for (std::size_t i = 0; i < it->second.size(); ++i)
      for (std::size_t j = i + 1; j < it->second.size(); ++j)
        if (levenshtein(it->second[i], it->second[j]) < threshold)
          throw std::runtime_error("submission: triggers for \"" + t +
                                   "\" violate the distance threshold");
  }
}

io::json Submission::to_json() const {
  io::json j;
  j["entries"] = entries;
  j["metadata"] = metadata;
  return j;
}

Submission Submission::from_json(const io::json& j) {
  io::require_keys(j, {"entries", "metadata"}, "submission");
  Submission s;
  s.entries = j.at("entries").get<std::map<std::string, std::vector<std::string>>>();
  if (j.contains("metadata")) s.metadata = j.at("metadata");
  return s;
}

Submission select_submission(
    const std::map<std::string, std::vector<RankedTrigger>>& survivors,
    const std::vector<std::string>& hidden_targets, int k,
    const std::map<std::string, std::vector<std::string>>& fallback) {
  Submission sub;
  io::json fell_back = io::json::array();
  for (const std::string& target : hidden_targets) {
    std::vector<std::string> picked;
    auto it = survivors.find(target);
    if (it != survivors.end()) {
      std::vector<RankedTrigger> ranked = it->second;
      std::stable_sort(ranked.begin(), ranked.end(),
                       [](const RankedTrigger& a, const RankedTrigger& b) { return a.loss < b.loss; });
      for (const RankedTrigger& r : ranked) {
        if (static_cast<int>(picked.size()) >= k) break;
        picked.push_back(r.trigger);
      }
    }
    if (picked.empty()) {
      auto fit = fallback.find(target);
      if (fit == fallback.end() || fit->second.empty())
        throw std::runtime_error("select_submission: no survivors and no fallback for \"" +
                                 target + "\"");
      for (const std::string& t : fit->second) {
        if (static_cast<int>(picked.size()) >= k) break;
        picked.push_back(t);
      }
      fell_back.push_back(target);
    }
    sub.entries[target] = std::move(picked);
  }
  sub.metadata["fallback_targets"] = fell_back;
  return sub;
}

ScoreReport score_submission(const Challenge& ch, const Submission& sub, const BleuConfig& cfg) {
  ScoreReport rep;
  std::vector<std::string> targets;
  targets.reserve(sub.entries.size());
  for (const auto& [t, v] : sub.entries) targets.push_back(t);
  rep.reasr = reasr(ch.trojaned_model, sub.entries, targets, cfg);
  rep.metadata = sub.metadata;
  if (ch.has_ground_truth) {
    const PredMap gt = ch.hidden_ground_truth();
    auto [per_target, mean] = recall(sub.entries, gt, cfg);
    rep.per_target_recall = std::move(per_target);
    rep.recall = mean;
    rep.combined = combined_score(rep.recall, rep.reasr);
    rep.metadata["recall_available"] = true;
  } else {
    rep.recall = -1.0;
    rep.combined = -1.0;
    rep.metadata["recall_available"] = false;
  }
  return rep;
}

void RunConfig::validate() const {
  if (challenge_dir.empty()) throw std::invalid_argument("run config: challenge_dir required");
  if (output_dir.empty()) throw std::invalid_argument("run config: output_dir required");
  if (!fs::exists(challenge_dir))
    throw std::invalid_argument("run config: challenge_dir does not exist: " + challenge_dir);
  if (methods.empty()) throw std::invalid_argument("run config: no methods selected");
  std::set<AttackMethod> seen;
  for (AttackMethod m : methods)
    if (!seen.insert(m).second)
      throw std::invalid_argument("run config: duplicate method " + std::string(to_string(m)));
  if (prompt_lengths.empty()) throw std::invalid_argument("run config: no prompt lengths");
  for (int L : prompt_lengths)
    if (L < 1) throw std::invalid_argument("run config: prompt lengths must be >= 1");
  if (pool_count < 1) throw std::invalid_argument("run config: pool_count must be >= 1");
  if (dedup_threshold < 1) throw std::invalid_argument("run config: dedup_threshold must be >= 1");
  if (submit_k < 1) throw std::invalid_argument("run config: submit_k must be >= 1");
  if (!seed_set) throw std::invalid_argument("run config: seed is required");
  if (wall_clock_budget < 0.0)
    throw std::invalid_argument("run config: wall_clock_budget must be >= 0");
  if (pool_policy != "uniform" && pool_policy != "round_robin")
    throw std::invalid_argument("run config: pool_policy must be \"uniform\" or \"round_robin\"");
  if (workers < 1) throw std::invalid_argument("run config: workers must be >= 1");
  for (const auto& [name, ac] : attack_overrides) {
    attack_method_from_string(name);
    ac.validate();
  }
}

io::json RunConfig::to_json() const {
  io::json j;
  j["challenge_dir"] = challenge_dir;
  j["output_dir"] = output_dir;
  io::json ms = io::json::array();
  for (AttackMethod m : methods) ms.push_back(to_string(m));
  j["methods"] = ms;
  j["prompt_lengths"] = prompt_lengths;
  io::json ov = io::json::object();
  for (const auto& [name, ac] : attack_overrides) ov[name] = ac.to_json();
  j["attack_overrides"] = ov;
  j["pool_count"] = pool_count;
  j["dedup_threshold"] = dedup_threshold;
  j["submit_k"] = submit_k;
  j["seed"] = seed;
  j["wall_clock_budget"] = wall_clock_budget;
  j["init_compare"] = init_compare;
  j["pool_policy"] = pool_policy;
  j["workers"] = workers;
  return j;
}

RunConfig RunConfig::from_json(const io::json& j) {
  io::require_keys(j,
                   {"challenge_dir", "output_dir", "methods", "prompt_lengths",
                    "attack_overrides", "pool_count", "dedup_threshold", "submit_k", "seed",
                    "wall_clock_budget", "init_compare", "pool_policy", "workers"},
                   "run config");
  RunConfig c;
  if (j.contains("challenge_dir")) c.challenge_dir = j.at("challenge_dir").get<std::string>();
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("methods")) {
    c.methods.clear();
    for (const io::json& m : j.at("methods"))
      c.methods.push_back(attack_method_from_string(m.get<std::string>()));
  }
  if (j.contains("prompt_lengths"))
    c.prompt_lengths = j.at("prompt_lengths").get<std::vector<int>>();
  if (j.contains("attack_overrides"))
    for (auto it = j.at("attack_overrides").begin(); it != j.at("attack_overrides").end(); ++it)
      c.attack_overrides.emplace(it.key(), AttackConfig::from_json(it.value()));
  if (j.contains("pool_count")) c.pool_count = j.at("pool_count").get<int>();
  if (j.contains("dedup_threshold")) c.dedup_threshold = j.at("dedup_threshold").get<int>();
  if (j.contains("submit_k")) c.submit_k = j.at("submit_k").get<int>();
  if (j.contains("seed")) {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.seed_set = true;
  }
  if (j.contains("wall_clock_budget"))
    c.wall_clock_budget = j.at("wall_clock_budget").get<double>();
  if (j.contains("init_compare")) c.init_compare = j.at("init_compare").get<bool>();
  if (j.contains("pool_policy")) c.pool_policy = j.at("pool_policy").get<std::string>();
  if (j.contains("workers")) c.workers = j.at("workers").get<int>();
  return c;
}

namespace {

struct Round {
  AttackMethod method;
  int prompt_len;  // 0 for methods that ignore it
  std::string name;
};

std::vector<Round> plan_rounds(const RunConfig& cfg) {
  std::vector<Round> rounds;
  for (AttackMethod m : cfg.methods) {
    if (m == AttackMethod::random_baseline) {
      rounds.push_back({m, 0, "random_baseline"});
      continue;
    }
    for (int L : cfg.prompt_lengths)
      rounds.push_back({m, L, std::string(to_string(m)) + "_m" + std::to_string(L)});
  }
  return rounds;
}

// One attacks/*.jsonl line: the attack result plus the pool bookkeeping the
// resume path needs to replay expansions.
struct RoundLine {
  int pool = 0;
  AttackResult result;
  std::string error;  // non-empty when the stage failed for this target
};

std::string round_lines_to_bytes(const std::vector<RoundLine>& lines) {
  std::string bytes;
  for (const RoundLine& l : lines) {
    io::json j;
    j["pool"] = l.pool;
    if (l.error.empty())
      j["attack"] = l.result.to_json();
    else
      j["error"] = l.error;
    bytes += j.dump();  // one record per line, unlike the pretty report files
    bytes += '\n';
  }
  return bytes;
}

std::vector<RoundLine> round_lines_from_file(const std::string& path) {
  std::istringstream in(io::read_file(path));
  std::vector<RoundLine> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const io::json j = io::json::parse(line);
    RoundLine l;
    l.pool = j.at("pool").get<int>();
    if (j.contains("error"))
      l.error = j.at("error").get<std::string>();
    else
      l.result = AttackResult::from_json(j.at("attack"));
    lines.push_back(std::move(l));
  }
  return lines;
}

int method_index(AttackMethod m) { return static_cast<int>(m); }

struct InitCompareRow {
  // Mean iterations over runs that found a forcing trigger; -1 when none did.
  double pool_mean = -1.0;
  double random_mean = -1.0;
  int pool_forced = 0;
  int random_forced = 0;
  int runs = 0;
};

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

PipelineOutcome run_pipeline(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Challenge ch = load_challenge(cfg.challenge_dir, false);
  const Vocab vocab = ch.trojaned_model.vocab();

  fs::create_directories(fs::path(cfg.output_dir) / "attacks");
  const std::string config_path = (fs::path(cfg.output_dir) / "config.json").string();
  const std::string config_bytes = io::to_canonical(cfg.to_json());
  if (fs::exists(config_path)) {
    if (io::read_file(config_path) != config_bytes)
      throw std::invalid_argument("pipeline: output_dir holds a run with a different config");
  } else {
    io::write_file_atomic(config_path, config_bytes);
  }

  std::vector<Pool> pools =
      pool_init(ch.revealed_map(), cfg.pool_count, derive_seed(cfg.seed, 0x706f6f6c));
  std::vector<std::string> revealed_triggers;
  for (const auto& [t, list] : ch.revealed_map())
    revealed_triggers.insert(revealed_triggers.end(), list.begin(), list.end());

  const std::vector<std::string>& hidden = ch.hidden_targets;
  std::map<std::string, int> target_index;
  for (std::size_t i = 0; i < ch.targets.size(); ++i)
    target_index[ch.targets[i]] = static_cast<int>(i);

  const std::vector<Round> rounds = plan_rounds(cfg);
  std::map<std::string, std::vector<const AttackResult*>> by_target;
  std::map<std::string, std::map<std::string, std::vector<const AttackResult*>>> by_method_target;
  std::vector<std::vector<RoundLine>> stored(rounds.size());
  std::map<std::string, InitCompareRow> compare_rows;

  io::json skipped = io::json::array();
  int failed_stages = 0;
  bool budget_exhausted = false;

  for (std::size_t ri = 0; ri < rounds.size(); ++ri) {
    const Round& round = rounds[ri];
    const std::string path =
        (fs::path(cfg.output_dir) / "attacks" / (round.name + ".jsonl")).string();
    const std::string cmp_path =
        (fs::path(cfg.output_dir) / "attacks" / (round.name + ".init_compare.jsonl")).string();
    const bool done = fs::exists(path) && (!cfg.init_compare ||
                                           round.method == AttackMethod::random_baseline ||
                                           fs::exists(cmp_path));
    if (!done) {
      if (cfg.wall_clock_budget > 0.0 && elapsed_s(t0) > cfg.wall_clock_budget) {
        budget_exhausted = true;
        skipped.push_back(round.name);
        continue;
      }
      // Pool draws are serialized up front so target-level parallelism can
      // never change which trigger seeds which search.
      Rng draw_rng(derive_seed(cfg.seed, 0x64726177, static_cast<std::uint64_t>(ri)));
      std::vector<AttackConfig> plans(hidden.size());
      std::vector<int> plan_pool(hidden.size(), 0);
      for (std::size_t ti = 0; ti < hidden.size(); ++ti) {
        const int gidx = target_index.at(hidden[ti]);
        AttackConfig ac;
        if (auto it = cfg.attack_overrides.find(to_string(round.method));
            it != cfg.attack_overrides.end())
          ac = it->second;
        ac.method = round.method;
        if (round.prompt_len > 0) ac.prompt_len = round.prompt_len;
        ac.seed = derive_seed(cfg.seed,
                              static_cast<std::uint64_t>(method_index(round.method)) * 256 +
                                  static_cast<std::uint64_t>(round.prompt_len),
                              static_cast<std::uint64_t>(gidx));
        if (round.method != AttackMethod::random_baseline) {
          int pidx = cfg.pool_policy == "round_robin"
                         ? gidx % cfg.pool_count
                         : draw_rng.uniform_int(cfg.pool_count);
          ac.init_tokens = vocab.encode(pool_draw(pools[static_cast<std::size_t>(pidx)], draw_rng));
          plan_pool[ti] = pidx;
        } else {
          plan_pool[ti] = target_index.at(hidden[ti]) % cfg.pool_count;
        }
        plans[ti] = std::move(ac);
      }

      std::vector<RoundLine> lines(hidden.size());
      std::vector<RoundLine> cmp_lines(hidden.size());
#pragma omp parallel for schedule(dynamic) num_threads(cfg.workers) if (cfg.workers > 1)
      for (std::size_t ti = 0; ti < hidden.size(); ++ti) {
        RoundLine l;
        l.pool = plan_pool[ti];
        try {
          l.result = run_attack(ch.trojaned_model, hidden[ti], plans[ti], revealed_triggers);
        } catch (const std::exception& e) {
          l.error = e.what();
          l.result = AttackResult{};
          l.result.target = hidden[ti];
          l.result.method = round.method;
        }
        lines[ti] = std::move(l);
        if (cfg.init_compare && round.method != AttackMethod::random_baseline) {
          AttackConfig rc = plans[ti];
          rc.init_tokens.clear();
          rc.seed = derive_seed(rc.seed, 0x636d70);
          RoundLine cl;
          cl.pool = plan_pool[ti];
          try {
            cl.result = run_attack(ch.trojaned_model, hidden[ti], rc, revealed_triggers);
          } catch (const std::exception& e) {
            cl.error = e.what();
            cl.result = AttackResult{};
            cl.result.target = hidden[ti];
            cl.result.method = round.method;
          }
          cmp_lines[ti] = std::move(cl);
        }
      }
      io::write_file_atomic(path, round_lines_to_bytes(lines));
      if (cfg.init_compare && round.method != AttackMethod::random_baseline)
        io::write_file_atomic(cmp_path, round_lines_to_bytes(cmp_lines));
    }

    stored[ri] = round_lines_from_file(path);
    for (const RoundLine& l : stored[ri]) {
      if (!l.error.empty()) {
        ++failed_stages;
        continue;
      }
      by_target[l.result.target].push_back(&l.result);
      by_method_target[to_string(round.method)][l.result.target].push_back(&l.result);
      for (const AttackCandidate& c : l.result.candidates)
        if (c.forces_target)
          pool_expand(pools[static_cast<std::size_t>(l.pool)], c.trigger);
    }
    if (cfg.init_compare && round.method != AttackMethod::random_baseline && fs::exists(cmp_path)) {
      InitCompareRow& row = compare_rows[to_string(round.method)];
      for (const RoundLine& pl : stored[ri]) {
        if (!pl.error.empty()) continue;
        row.runs += 1;
        const bool pf = std::any_of(pl.result.candidates.begin(), pl.result.candidates.end(),
                                    [](const AttackCandidate& c) { return c.forces_target; });
        if (pf) {
          row.pool_mean = row.pool_mean < 0 ? 0.0 : row.pool_mean;
          row.pool_mean += pl.result.iterations_used;
          row.pool_forced += 1;
        }
      }
      for (const RoundLine& rl : round_lines_from_file(cmp_path)) {
        if (!rl.error.empty()) continue;
        const bool rf = std::any_of(rl.result.candidates.begin(), rl.result.candidates.end(),
                                    [](const AttackCandidate& c) { return c.forces_target; });
        if (rf) {
          row.random_mean = row.random_mean < 0 ? 0.0 : row.random_mean;
          row.random_mean += rl.result.iterations_used;
          row.random_forced += 1;
        }
      }
    }
  }
  for (auto& [name, row] : compare_rows) {
    if (row.pool_forced > 0) row.pool_mean /= row.pool_forced;
    if (row.random_forced > 0) row.random_mean /= row.random_forced;
  }

  // Stage 2: merge candidates per target, best loss per distinct string.
  const auto merge = [](const std::map<std::string, std::vector<const AttackResult*>>& results) {
    std::map<std::string, std::vector<RankedTrigger>> merged;
    for (const auto& [target, rs] : results) {
      std::map<std::string, double> best;
      for (const AttackResult* r : rs)
        for (const AttackCandidate& c : r->candidates) {
          auto [it, fresh] = best.try_emplace(c.trigger, c.loss);
          if (!fresh && c.loss < it->second) it->second = c.loss;
        }
      std::vector<RankedTrigger> v;
      v.reserve(best.size());
      for (const auto& [trigger, loss] : best) v.push_back({trigger, loss});
      std::stable_sort(v.begin(), v.end(), [](const RankedTrigger& a, const RankedTrigger& b) {
        if (a.loss != b.loss) return a.loss < b.loss;
        return a.trigger < b.trigger;
      });
      merged[target] = std::move(v);
    }
    return merged;
  };

  const auto stage_maps = [&](const std::map<std::string, std::vector<RankedTrigger>>& merged,
                              std::map<std::string, std::vector<std::string>>* filtered_out) {
    std::map<std::string, std::vector<std::string>> ordered;
    std::map<std::string, std::map<std::string, double>> loss_of;
    for (const auto& [target, v] : merged) {
      for (const RankedTrigger& r : v) {
        ordered[target].push_back(r.trigger);
        loss_of[target][r.trigger] = r.loss;
      }
    }
    const auto filtered = filter_regenerate(ch.trojaned_model, ordered);
    if (filtered_out) *filtered_out = filtered;
    std::map<std::string, std::vector<RankedTrigger>> survivors;
    for (const auto& [target, list] : filtered) {
      std::vector<RankedTrigger> v;
      for (const std::string& t : dedup_levenshtein(list, cfg.dedup_threshold))
        v.push_back({t, loss_of[target][t]});
      survivors[target] = std::move(v);
    }
    return survivors;
  };

  // Fallback lists: the baseline's own samples, deduped, loss-ranked. Targets
  // the baseline never covered get freshly drawn samples.
  std::map<std::string, std::vector<std::string>> fallback;
  {
    const auto baseline_merged = merge(by_method_target["random_baseline"]);
    for (const std::string& target : hidden) {
      std::vector<std::string> list;
      if (auto it = baseline_merged.find(target); it != baseline_merged.end())
        for (const RankedTrigger& r : it->second) list.push_back(r.trigger);
      if (list.empty()) {
        AttackConfig ac;
        ac.method = AttackMethod::random_baseline;
        ac.iterations = 200;
        ac.early_exit = false;
        ac.seed = derive_seed(cfg.seed, 0x66616c6c,
                              static_cast<std::uint64_t>(target_index.at(target)));
        for (const AttackCandidate& c :
             attack_random_baseline(revealed_triggers, ch.trojaned_model, target, ac).candidates)
          list.push_back(c.trigger);
      }
      fallback[target] = dedup_levenshtein(list, cfg.dedup_threshold);
    }
  }

  const auto merged = merge(by_target);
  io::json cand_json = io::json::object();
  for (const auto& [target, v] : merged) {
    io::json arr = io::json::array();
    for (const RankedTrigger& r : v) arr.push_back({{"trigger", r.trigger}, {"loss", r.loss}});
    cand_json[target] = arr;
  }
  io::write_json_atomic((fs::path(cfg.output_dir) / "candidates.json").string(), cand_json);

  std::map<std::string, std::vector<std::string>> filtered;
  const auto survivors = stage_maps(merged, &filtered);
  io::write_json_atomic((fs::path(cfg.output_dir) / "filtered.json").string(),
                        io::json(filtered));

  Submission sub = select_submission(survivors, hidden, cfg.submit_k, fallback);
  sub.metadata["partial"] = budget_exhausted || failed_stages > 0;
  sub.metadata["skipped_rounds"] = skipped;
  sub.validate(hidden, cfg.submit_k, cfg.dedup_threshold);
  io::write_json_atomic((fs::path(cfg.output_dir) / "submission.json").string(), sub.to_json());

  ScoreReport report = score_submission(ch, sub, BleuConfig{});
  report.metadata["failed_stages"] = failed_stages;
  report.metadata["budget_exhausted"] = budget_exhausted;

  // Per-method rows for the comparison table, each scored on its own
  // filtered/deduped/selected submission.
  io::json per_method = io::json::object();
  std::string table;
  {
    std::ostringstream os;
    os << "method            recall    reasr     combined\n";
    os << "------            ------    -----     --------\n";
    const auto fmt = [](double v) {
      if (v < 0) return std::string("   n/a");
      char buf[16];
      std::snprintf(buf, sizeof buf, "%.4f", v);
      return std::string(buf);
    };
    for (AttackMethod m : cfg.methods) {
      const std::string name = to_string(m);
      if (by_method_target.find(name) == by_method_target.end()) continue;
      const auto m_surv = stage_maps(merge(by_method_target[name]), nullptr);
      Submission msub = select_submission(m_surv, hidden, cfg.submit_k, fallback);
      const ScoreReport mrep = score_submission(ch, msub, BleuConfig{});
      per_method[name] = {{"recall", mrep.recall},
                          {"reasr", mrep.reasr},
                          {"combined", mrep.combined},
                          {"fallback_targets", msub.metadata["fallback_targets"]}};
      os << name << std::string(name.size() < 18 ? 18 - name.size() : 1, ' ') << fmt(mrep.recall)
         << "    " << fmt(mrep.reasr) << "    " << fmt(mrep.combined);
      if (cfg.init_compare && compare_rows.count(name)) {
        const InitCompareRow& row = compare_rows[name];
        os << "    pool_iters=" << fmt(row.pool_mean) << " (" << row.pool_forced << "/"
           << row.runs << ")"
           << "    random_iters=" << fmt(row.random_mean) << " (" << row.random_forced << "/"
           << row.runs << ")";
      }
      os << "\n";
    }
    os << "all               " << fmt(report.recall) << "    " << fmt(report.reasr) << "    "
       << fmt(report.combined) << "\n";
    table = os.str();
  }
  report.metadata["per_method"] = per_method;
  if (cfg.init_compare) {
    io::json rows = io::json::object();
    for (const auto& [name, row] : compare_rows)
      rows[name] = {{"pool_mean_iterations", row.pool_mean},
                    {"random_mean_iterations", row.random_mean},
                    {"pool_forced", row.pool_forced},
                    {"random_forced", row.random_forced},
                    {"runs", row.runs}};
    report.metadata["init_compare"] = rows;
    io::write_json_atomic((fs::path(cfg.output_dir) / "init_compare.json").string(), rows);
  }
  io::write_json_atomic((fs::path(cfg.output_dir) / "score_report.json").string(),
                        report.to_json());
  io::write_file_atomic((fs::path(cfg.output_dir) / "table.txt").string(), table);

  io::json pools_json = io::json::array();
  for (const Pool& p : pools) pools_json.push_back(p.to_json());
  io::write_json_atomic((fs::path(cfg.output_dir) / "pools.json").string(), pools_json);

  PipelineOutcome out;
  out.run_dir = cfg.output_dir;
  out.report = std::move(report);
  out.partial = budget_exhausted || failed_stages > 0;
  return out;
}

}  // namespace trojanlab
