// Acceptance gate: eight end-to-end checks, one PASS/FAIL line each. Heavy
// artifacts (base model, challenge, pipeline run) persist under --work-dir
// and are reused on rerun, so a failed criterion can be retried alone via
// --criterion N without regenerating everything before it.
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "trojanlab/attacks.hpp"
#include "trojanlab/corpus.hpp"
#include "trojanlab/harness.hpp"
#include "trojanlab/io_util.hpp"
#include "trojanlab/metrics.hpp"
#include "trojanlab/model.hpp"
#include "trojanlab/oracle.hpp"
#include "trojanlab/rng.hpp"
#include "trojanlab/tape.hpp"
#include "trojanlab/trojan.hpp"
#include "trojanlab/vocab.hpp"

using namespace trojanlab;
namespace fs = std::filesystem;

namespace {

double now_s() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

std::string fmt(const char* pattern, ...) {
  char buf[512];
  va_list args;
  va_start(args, pattern);
  std::vsnprintf(buf, sizeof buf, pattern, args);
  va_end(args);
  return buf;
}

struct Check {
  bool pass = false;
  std::string detail;
};

// Shared lab state. Everything is created on first use and persisted, so the
// criteria can run independently yet share one challenge and one pipeline run.
struct Lab {
  fs::path work;
  std::uint64_t pipeline_seed = 2023;

  Model base_model;
  bool base_ready = false;
  double base_seconds = 0.0;

  Challenge ch;
  bool ch_ready = false;
  double gen_seconds = 0.0;

  ScoreReport run_report;
  bool run_ready = false;
  double run_seconds = 0.0;
  bool run_partial = false;

  fs::path base_path() const { return work / "base.tlm"; }
  fs::path challenge_dir() const { return work / "challenge"; }
  fs::path run_dir() const { return work / "run"; }
  fs::path meta_path() const { return work / "lab_meta.json"; }

  io::json meta() const {
    return fs::exists(meta_path()) ? io::parse_json_file(meta_path().string())
                                   : io::json::object();
  }
  void merge_meta(const io::json& add) {
    io::json m = meta();
    for (auto it = add.begin(); it != add.end(); ++it) m[it.key()] = it.value();
    io::write_json_atomic(meta_path().string(), m);
  }

  const Model& base() {
    if (base_ready) return base_model;
    if (fs::exists(base_path())) {
      base_model = Model::load(base_path().string());
      base_seconds = meta().value("base_seconds", 0.0);
    } else {
      const double t0 = now_s();
      base_model = train_base(clean_corpus(), LmConfig{}, TrainConfig{});
      base_seconds = now_s() - t0;
      base_model.save(base_path().string());
      merge_meta({{"base_seconds", base_seconds}});
    }
    base_ready = true;
    return base_model;
  }

  const Challenge& challenge() {
    if (ch_ready) return ch;
    if (fs::exists(challenge_dir() / "challenge.json")) {
      ch = load_challenge(challenge_dir().string());
      gen_seconds = meta().value("gen_seconds", 0.0);
    } else {
      const Model& b = base();
      const double t0 = now_s();
      ch = generate_challenge(b, ChallengeConfig{});
      gen_seconds = now_s() - t0;
      save_challenge(challenge_dir().string(), ch);
      merge_meta({{"gen_seconds", gen_seconds}});
    }
    ch_ready = true;
    return ch;
  }

  RunConfig default_run_config() {
    RunConfig rc;
    rc.challenge_dir = challenge_dir().string();
    rc.output_dir = run_dir().string();
    rc.seed = pipeline_seed;
    rc.seed_set = true;
    return rc;
  }

  const ScoreReport& run() {
    if (run_ready) return run_report;
    challenge();
    if (fs::exists(run_dir() / "score_report.json") && meta().contains("run_seconds")) {
      run_report = ScoreReport::from_json(io::parse_json_file((run_dir() / "score_report.json").string()));
      run_seconds = meta().value("run_seconds", 0.0);
      run_partial = run_report.metadata.value("budget_exhausted", false) ||
                    run_report.metadata.value("failed_stages", 0) > 0;
    } else {
      const double t0 = now_s();
      const PipelineOutcome out = run_pipeline(default_run_config());
      run_seconds = now_s() - t0;
      run_report = out.report;
      run_partial = out.partial;
      merge_meta({{"run_seconds", run_seconds}});
    }
    run_ready = true;
    return run_report;
  }
};

Tensor random_tensor(int rows, int cols, Rng& rng, double scale = 1.0) {
  Tensor t(rows, cols);
  for (double& x : t.data) x = rng.normal() * scale;
  return t;
}

// Reduce a node to 1x1 so every op goes through the same FD harness:
// scalar = ones_row * (v*v) * ones_col.
int to_scalar(Tape& tape, int node) {
  const int sq = tape.mul(node, node);
  const Tensor& v = tape.value(sq);
  Tensor ones_col(v.cols, 1);
  for (double& x : ones_col.data) x = 1.0;
  const int colsum = tape.matmul(sq, tape.leaf(std::move(ones_col)));
  Tensor ones_row(1, v.rows);
  for (double& x : ones_row.data) x = 1.0;
  return tape.matmul(tape.leaf(std::move(ones_row)), colsum);
}

// ---------------------------------------------------------------- criterion 1

Check criterion1(Lab&) {
  const double t0 = now_s();
  const double tol = 1e-4;
  double worst = 0.0;
  std::string worst_site = "none";
  long long coords = 0;
  const auto track = [&](const std::string& site, const FdCheckResult& r) {
    coords += r.n_checked;
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_site = site;
    }
  };

  Rng rng(4101);
  using Builder = std::pair<int, std::vector<int>> (*)(Tape&, const std::vector<Tensor>&);
  struct Prim {
    const char* name;
    std::vector<Tensor> inits;
    Builder build;
  };
  const std::vector<Prim> prims = {
      {"matmul",
       {random_tensor(3, 4, rng), random_tensor(4, 5, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
         return std::make_pair(to_scalar(t, t.matmul(a, b)), std::vector<int>{a, b});
       }},
      {"matmul_nt",
       {random_tensor(3, 4, rng), random_tensor(5, 4, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
         return std::make_pair(to_scalar(t, t.matmul_nt(a, b)), std::vector<int>{a, b});
       }},
      {"add",
       {random_tensor(4, 6, rng), random_tensor(4, 6, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
         return std::make_pair(to_scalar(t, t.add(a, b)), std::vector<int>{a, b});
       }},
      {"add_bias",
       {random_tensor(4, 6, rng), random_tensor(1, 6, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
         return std::make_pair(to_scalar(t, t.add_bias(a, b)), std::vector<int>{a, b});
       }},
      {"mul",
       {random_tensor(4, 6, rng), random_tensor(4, 6, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
         return std::make_pair(to_scalar(t, t.mul(a, b)), std::vector<int>{a, b});
       }},
      {"scale",
       {random_tensor(4, 6, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int a = t.leaf(vs[0], true);
         return std::make_pair(to_scalar(t, t.scale(a, 0.7)), std::vector<int>{a});
       }},
      {"softmax_rows",
       {random_tensor(3, 7, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int a = t.leaf(vs[0], true);
         return std::make_pair(to_scalar(t, t.softmax_rows(a)), std::vector<int>{a});
       }},
      {"log_softmax_rows",
       {random_tensor(3, 7, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int a = t.leaf(vs[0], true);
         return std::make_pair(to_scalar(t, t.log_softmax_rows(a)), std::vector<int>{a});
       }},
      {"layernorm_rows",
       {random_tensor(3, 8, rng), random_tensor(1, 8, rng), random_tensor(1, 8, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int x = t.leaf(vs[0], true), g = t.leaf(vs[1], true), b = t.leaf(vs[2], true);
         return std::make_pair(to_scalar(t, t.layernorm_rows(x, g, b, 1e-5)),
                               std::vector<int>{x, g, b});
       }},
      {"gelu",
       {random_tensor(4, 5, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int a = t.leaf(vs[0], true);
         return std::make_pair(to_scalar(t, t.gelu(a)), std::vector<int>{a});
       }},
      {"embedding_gather",
       {random_tensor(6, 4, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int table = t.leaf(vs[0], true);
         return std::make_pair(to_scalar(t, t.embedding_gather(table, {1, 3, 3, 0, 5})),
                               std::vector<int>{table});
       }},
      {"concat_rows",
       {random_tensor(2, 5, rng), random_tensor(3, 5, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
         return std::make_pair(to_scalar(t, t.concat_rows({a, b})), std::vector<int>{a, b});
       }},
      {"cross_entropy",
       {random_tensor(4, 9, rng)},
       [](Tape& t, const std::vector<Tensor>& vs) {
         const int logits = t.leaf(vs[0], true);
         return std::make_pair(t.cross_entropy(logits, {{0, 2}, {1, 7}, {3, 0}}),
                               std::vector<int>{logits});
       }},
  };
  for (const Prim& p : prims) track(p.name, finite_diff_check(p.inits, p.build));

  {
    // soft_cross_entropy wants normalized target rows.
    Tensor logits = random_tensor(3, 6, rng);
    Tensor targets(3, 6);
    for (int r = 0; r < 3; ++r) {
      double s = 0.0;
      for (int c = 0; c < 6; ++c) {
        targets.at(r, c) = std::abs(rng.normal()) + 0.1;
        s += targets.at(r, c);
      }
      for (int c = 0; c < 6; ++c) targets.at(r, c) /= s;
    }
    track("soft_cross_entropy",
          finite_diff_check({logits, targets}, [](Tape& t, const std::vector<Tensor>& vs) {
            const int l = t.leaf(vs[0], true), p = t.leaf(vs[1], true);
            return std::make_pair(t.soft_cross_entropy(l, p), std::vector<int>{l, p});
          }));
  }

  // Full LM loss at 20 random points: random weights and a random sequence
  // each time; gradients w.r.t. every parameter matrix and w.r.t. a soft
  // prompt both go through the complete transformer graph.
  const LmConfig cfg;
  const auto spec = Model::param_spec(cfg);
  const int V = cfg.vocab_size();
  for (int point = 0; point < 20; ++point) {
    Rng prng(derive_seed(4102, 0x706f696e74, point));
    const Model m = Model::init(cfg, derive_seed(4103, 0x696e6974, point));

    std::vector<int> tokens(8);
    tokens[0] = Vocab::kBos;
    for (std::size_t i = 1; i < tokens.size(); ++i) tokens[i] = 2 + prng.uniform_int(V - 2);
    std::vector<std::pair<int, int>> slots;
    for (std::size_t r = 0; r + 1 < tokens.size(); ++r)
      slots.push_back({static_cast<int>(r), tokens[r + 1]});

    std::vector<Tensor> inits;
    for (const auto& [name, shape] : spec) inits.push_back(m.p(name));
    const auto build = [&cfg, &spec, &tokens, &slots](Tape& tape, const std::vector<Tensor>& vs) {
      Model probe;
      probe.config = cfg;
      for (std::size_t i = 0; i < spec.size(); ++i) probe.params[spec[i].first] = vs[i];
      LmGraph g(probe, tape, true);
      const int loss = g.ce_loss(g.forward_logits({LmGraph::Seg::tokens(tokens)}), slots);
      std::vector<int> leaves;
      for (const auto& [name, shape] : spec) leaves.push_back(g.param_leaf(name));
      return std::make_pair(loss, leaves);
    };
    // h balances truncation against cancellation on the ~1e-6 gradient
    // coordinates a full transformer produces at random weights.
    track(fmt("lm_loss/params@%d", point),
          finite_diff_check(inits, build, 2, 1e-4, derive_seed(4104, point)));

    // Input side: loss of a random soft prompt against a short hard target.
    std::vector<int> target(3);
    for (int& id : target) id = 2 + prng.uniform_int(V - 2);
    Tensor theta(4, V);
    for (int r = 0; r < theta.rows; ++r) {
      double s = 0.0;
      for (int c = 0; c < V; ++c) {
        theta.at(r, c) = std::abs(prng.normal()) + 1e-3;
        s += theta.at(r, c);
      }
      for (int c = 0; c < V; ++c) theta.at(r, c) /= s;
    }
    Tensor analytic;
    soft_forward(m, theta, target, false, &analytic);
    track(fmt("lm_loss/input@%d", point),
          finite_diff_check_fn(
              [&](const Tensor& x) { return soft_forward(m, x, target); },
              analytic, theta, 6, 1e-4, derive_seed(4105, point)));
  }

  const double secs = now_s() - t0;
  const bool pass = worst < tol && secs < 60.0;
  return {pass, fmt("max rel err %.3g (at %s, tol 1e-4) over %lld sampled coordinates; %.1fs (budget 60s)",
                    worst, worst_site.c_str(), coords, secs)};
}

// ---------------------------------------------------------------- criterion 2

Check criterion2(Lab&) {
  const double t0 = now_s();
  const double tol = 1e-12;

  struct Fixture {
    const char* cand;
    const char* ref;
    int max_n;
    std::vector<double> weights;
    double expected;
  };
  const std::vector<Fixture> fixtures = {
      {"the cat", "the cat sat on the mat", 4, {}, 0.1353352832366127},
      {"a quick brown fox jumps", "a quick brown fox jumps", 4, {}, 1.0},
      {"x y z", "a b c", 4, {}, 0.0},
      {"a b c d", "a b c d e", 4, {}, 0.7788007830714049},
      {"the the the the", "the cat", 1, {}, 0.25},
      {"a", "a b c", 4, {}, 0.1353352832366127},
      {"a b b", "a b", 2, {}, 0.5773502691896257},
      {"a b b", "a b", 2, {0.75, 0.25}, 0.6204032394013996},
      {"a b c", "a b c d", 4, {}, 0.7165313105737893},
      {"a c", "a b", 1, {}, 0.5},
  };
  int fixture_fails = 0;
  for (const Fixture& f : fixtures) {
    BleuConfig cfg;
    cfg.max_n = f.max_n;
    cfg.weights = f.weights;
    if (std::abs(bleu(f.cand, f.ref, cfg) - f.expected) > tol) ++fixture_fails;
    if (std::abs(oracle::bleu_by_definition(f.cand, f.ref, cfg) - f.expected) > tol)
      ++fixture_fails;
  }

  // Randomized recall/REASR cases, metrics module vs the independent oracle.
  const LmConfig small{.d_model = 16, .n_layers = 1, .n_heads = 2, .ff_mult = 2, .max_len = 32};
  const Model m = Model::init(small, 99);
  Rng rng(777);
  const auto word = [&rng]() {
    static const std::string alpha = "abcdefghijklmnopqrstuvwxyz";
    const int len = 2 + rng.uniform_int(4);
    std::string w;
    for (int i = 0; i < len; ++i) w += alpha[static_cast<std::size_t>(rng.uniform_int(26))];
    return w;
  };
  const auto phrase = [&]() {
    std::string s = word();
    const int extra = rng.uniform_int(3);
    for (int i = 0; i < extra; ++i) s += " " + word();
    return s;
  };
  double worst_gap = 0.0;
  for (int c = 0; c < 100; ++c) {
    PredMap preds, truth;
    std::vector<std::string> targets;
    const int n_targets = 2 + rng.uniform_int(3);
    for (int i = 0; i < n_targets; ++i) {
      const std::string target = phrase();
      if (truth.count(target)) continue;
      targets.push_back(target);
      const int n_truth = 1 + rng.uniform_int(3);
      for (int k = 0; k < n_truth; ++k) truth[target].push_back(phrase());
      const int n_pred = 1 + rng.uniform_int(3);
      for (int k = 0; k < n_pred; ++k) preds[target].push_back(phrase());
    }
    const double fast_recall = recall(preds, truth).second;
    const double fast_reasr = reasr(m, preds, targets);
    const ScoreReport slow = oracle::recompute_metrics(m, preds, truth);
    worst_gap = std::max(worst_gap, std::abs(fast_recall - slow.recall));
    worst_gap = std::max(worst_gap, std::abs(fast_reasr - slow.reasr));
  }

  const double secs = now_s() - t0;
  const bool pass = fixture_fails == 0 && worst_gap <= tol && secs < 60.0;
  return {pass, fmt("10 BLEU fixtures (%d mismatches), 100 random recall/REASR cases vs oracle "
                    "(max gap %.3g, tol 1e-12); %.1fs (budget 60s)",
                    fixture_fails, worst_gap, secs)};
}

// ---------------------------------------------------------------- criterion 3

Check criterion3(Lab& lab) {
  const Challenge& ch = lab.challenge();
  const double success = insertion_success(ch.trojaned_model, ch.all_pairs());

  std::vector<std::vector<int>> seqs;
  const Vocab vocab = ch.base_model.vocab();
  for (const std::string& t : clean_corpus()) {
    std::vector<int> ids = vocab.encode(t);
    ids.insert(ids.begin(), Vocab::kBos);
    seqs.push_back(std::move(ids));
  }
  const double retention = top1_agreement(ch.base_model, ch.trojaned_model, seqs);

  const double secs = lab.base_seconds + lab.gen_seconds;
  const bool pass = success == 1.0 && retention >= 0.8 && secs < 900.0;
  return {pass,
          fmt("default challenge (%zu targets x %d triggers, %zu revealed): insertion_success "
              "%.3f (need 1.0), clean retention %.3f (need >= 0.8); base train + generation "
              "%.0fs (budget 900s)",
              ch.targets.size(),
              ch.targets.empty() ? 0
                                 : static_cast<int>(ch.triggers_by_target.begin()->second.size()),
              ch.revealed_targets.size(), success, retention, secs)};
}

// ---------------------------------------------------------------- criterion 4

Check criterion4(Lab& lab) {
  const double t0 = now_s();
  oracle::OracleLimit lim;  // vocab 10, prompts up to length 3
  const std::uint64_t seed = 5;
  const int instances = 50, iterations = 60;

  int with_forcing = 0, gcg_hits = 0, arca_hits = 0;
  io::json traces = {{"gcg", io::json::array()}, {"arca", io::json::array()}};
  for (int i = 0; i < instances; ++i) {
    const auto inst = oracle::tiny_trojaned_instance(lim, derive_seed(seed, 0x696e7374, i));
    const auto truth = oracle::exhaustive_best_prompt(inst.model, inst.target, lim);
    if (truth.forcing_prompts.empty()) continue;
    ++with_forcing;
    bool gcg_ok = false, arca_ok = false;
    for (int L = 1; L <= lim.max_prompt_len && !(gcg_ok && arca_ok); ++L) {
      AttackConfig ac;
      ac.prompt_len = L;
      ac.iterations = iterations;
      ac.seed = derive_seed(seed, 0x636865636b, i * 8 + L);
      ac.gcg.batch = std::min(ac.gcg.batch, ac.gcg.top_k * L);
      if (!gcg_ok) {
        ac.method = AttackMethod::gcg;
        const AttackResult r = run_attack(inst.model, inst.target, ac);
        traces["gcg"].push_back(r.committed_losses);
        for (const AttackCandidate& c : r.candidates) gcg_ok |= c.forces_target;
      }
      if (!arca_ok) {
        ac.method = AttackMethod::arca;
        const AttackResult r = run_attack(inst.model, inst.target, ac);
        traces["arca"].push_back(r.committed_losses);
        for (const AttackCandidate& c : r.candidates) arca_ok |= c.forces_target;
      }
    }
    gcg_hits += gcg_ok;
    arca_hits += arca_ok;
  }
  io::write_json_atomic((lab.work / "c4_traces.json").string(), traces);

  const double secs = now_s() - t0;
  const double gcg_rate = with_forcing ? static_cast<double>(gcg_hits) / with_forcing : 0.0;
  const double arca_rate = with_forcing ? static_cast<double>(arca_hits) / with_forcing : 0.0;
  const bool pass =
      with_forcing > 0 && gcg_rate >= 0.8 && arca_rate >= 0.7 && secs < 600.0;
  return {pass, fmt("oracle found forcing prompts in %d/%d tiny instances; GCG recovered %d/%d "
                    "(%.0f%%, need >= 80%%), ARCA %d/%d (%.0f%%, need >= 70%%); %.0fs (budget 600s)",
                    with_forcing, instances, gcg_hits, with_forcing, 100.0 * gcg_rate, arca_hits,
                    with_forcing, 100.0 * arca_rate, secs)};
}

// ---------------------------------------------------------------- criterion 5

Check criterion5(Lab& lab) {
  const ScoreReport& report = lab.run();
  const bool pass = !lab.run_partial && report.reasr >= 0.9 && lab.run_seconds < 1800.0;
  return {pass, fmt("pipeline REASR %.4f (need >= 0.9), recall %.4f, combined %.4f, partial=%s; "
                    "%.0fs (budget 1800s)",
                    report.reasr, report.recall, report.combined,
                    lab.run_partial ? "true" : "false", lab.run_seconds)};
}

// ---------------------------------------------------------------- criterion 6

Check criterion6(Lab& lab) {
  const ScoreReport& report = lab.run();
  const io::json& pm = report.metadata.at("per_method");
  if (!pm.contains("gcg") || !pm.contains("random_baseline"))
    return {false, "per-method rows missing from the score report"};
  const double base_recall = pm["random_baseline"]["recall"].get<double>();
  const double gcg_recall = pm["gcg"]["recall"].get<double>();

  const std::string table = io::read_file((lab.run_dir() / "table.txt").string());
  const bool side_by_side = table.find("gcg") != std::string::npos &&
                            table.find("random_baseline") != std::string::npos;

  const bool pass = base_recall > 0.0 && side_by_side;
  return {pass, fmt("baseline recall %.6f (need > 0), GCG recall %.4f alongside it "
                    "(no ordering asserted); table rows present=%s",
                    base_recall, gcg_recall, side_by_side ? "yes" : "no")};
}

// ---------------------------------------------------------------- criterion 7

// Report artifacts whose bytes must match across seeded reruns. Attack round
// logs are excluded: they embed wall-clock times by design.
const std::vector<const char*> kComparedArtifacts = {
    "candidates.json", "filtered.json", "submission.json", "score_report.json", "table.txt"};

std::string first_artifact_mismatch(const fs::path& a, const fs::path& b) {
  for (const char* name : kComparedArtifacts) {
    if (!fs::exists(a / name) || !fs::exists(b / name)) return name;
    if (io::read_file((a / name).string()) != io::read_file((b / name).string())) return name;
  }
  return "";
}

RunConfig small_run_config(Lab& lab, const fs::path& out) {
  RunConfig rc;
  rc.challenge_dir = lab.challenge_dir().string();
  rc.output_dir = out.string();
  rc.prompt_lengths = {8};
  rc.pool_count = 2;
  rc.submit_k = 5;
  rc.seed = 77;
  rc.seed_set = true;
  AttackConfig gcg;
  gcg.method = AttackMethod::gcg;
  gcg.iterations = 80;
  gcg.gcg.top_k = 8;
  gcg.gcg.batch = 24;
  gcg.keep_candidates = 16;
  rc.attack_overrides["gcg"] = gcg;
  AttackConfig baseline;
  baseline.method = AttackMethod::random_baseline;
  baseline.iterations = 60;
  rc.attack_overrides["random_baseline"] = baseline;
  return rc;
}

Check criterion7(Lab& lab) {
  const double t0 = now_s();
  const Challenge& ch = lab.challenge();
  lab.run();

  // Filtered candidates regenerate their targets, by re-running generation.
  int regen_total = 0, regen_ok = 0;
  {
    const io::json filtered = io::parse_json_file((lab.run_dir() / "filtered.json").string());
    const Vocab vocab = ch.trojaned_model.vocab();
    for (const auto& [target, triggers] : filtered.items()) {
      for (const auto& trig : triggers) {
        ++regen_total;
        const std::string gen =
            greedy_generate(ch.trojaned_model, vocab.encode(trig.get<std::string>()),
                            static_cast<int>(target.size()));
        regen_ok += gen == target;
      }
    }
  }

  // Dedup invariant on the submitted lists of the main run (T = 5 default).
  int dedup_violations = 0;
  {
    const Submission sub =
        Submission::from_json(io::parse_json_file((lab.run_dir() / "submission.json").string()));
    for (const auto& [target, list] : sub.entries)
      for (std::size_t i = 0; i < list.size(); ++i)
        for (std::size_t j = i + 1; j < list.size(); ++j)
          dedup_violations += levenshtein(list[i], list[j]) < 5;
  }

  // Seeded rerun byte-identity on a reduced configuration, fresh dirs.
  const fs::path dir_a = lab.work / "rerun_a";
  const fs::path dir_b = lab.work / "rerun_b";
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  const double ta = now_s();
  run_pipeline(small_run_config(lab, dir_a));
  const double rerun_seconds = now_s() - ta;
  run_pipeline(small_run_config(lab, dir_b));
  const std::string rerun_mismatch = first_artifact_mismatch(dir_a, dir_b);

  // Kill the same run partway through in a child process, then resume it in
  // this one; the resumed artifacts must match the uninterrupted run's bytes.
  const fs::path dir_k = lab.work / "resume_kill";
  fs::remove_all(dir_k);
  const RunConfig kill_cfg = small_run_config(lab, dir_k);
  io::write_json_atomic((lab.work / "resume_cfg.json").string(), kill_cfg.to_json());
  std::string resume_mismatch = "child spawn failed";
  const pid_t pid = fork();
  if (pid == 0) {
    const std::string cfg_path = (lab.work / "resume_cfg.json").string();
    execl("/proc/self/exe", "acceptance", "--child-run", cfg_path.c_str(),
          static_cast<char*>(nullptr));
    _exit(127);
  }
  if (pid > 0) {
    const double grace = std::max(2.0, 0.35 * rerun_seconds);
    usleep(static_cast<useconds_t>(grace * 1e6));
    kill(pid, SIGKILL);
    int status = 0;
    waitpid(pid, &status, 0);
    run_pipeline(kill_cfg);
    resume_mismatch = first_artifact_mismatch(dir_a, dir_k);
  }

  const double secs = now_s() - t0;
  const bool pass = regen_total > 0 && regen_ok == regen_total && dedup_violations == 0 &&
                    rerun_mismatch.empty() && resume_mismatch.empty();
  return {pass,
          fmt("post-filter regeneration %d/%d; dedup violations %d; seeded rerun %s; "
              "kill+resume vs uninterrupted %s; %.0fs",
              regen_ok, regen_total, dedup_violations,
              rerun_mismatch.empty() ? "byte-identical"
                                     : ("differs at " + rerun_mismatch).c_str(),
              resume_mismatch.empty() ? "byte-identical"
                                      : ("differs at " + resume_mismatch).c_str(),
              secs)};
}

// ---------------------------------------------------------------- criterion 8

Check criterion8(Lab& lab) {
  lab.run();

  // Committed-loss traces from every attack artifact this gate produced.
  int traces_checked = 0, trace_violations = 0;
  const auto check_trace = [&](const io::json& losses) {
    ++traces_checked;
    for (std::size_t i = 1; i < losses.size(); ++i)
      if (losses[i].get<double>() > losses[i - 1].get<double>()) ++trace_violations;
  };
  for (const fs::path run : {lab.run_dir(), lab.work / "rerun_a", lab.work / "rerun_b",
                             lab.work / "resume_kill"}) {
    const fs::path attacks = run / "attacks";
    if (!fs::exists(attacks)) continue;
    for (const auto& entry : fs::directory_iterator(attacks)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("gcg", 0) != 0 && name.rfind("arca", 0) != 0) continue;
      std::istringstream in(io::read_file(entry.path().string()));
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const io::json j = io::json::parse(line);
        if (j.contains("attack")) check_trace(j["attack"]["committed_losses"]);
      }
    }
  }
  const fs::path c4_path = lab.work / "c4_traces.json";
  if (fs::exists(c4_path)) {
    const io::json traces = io::parse_json_file(c4_path.string());
    for (const char* method : {"gcg", "arca"})
      for (const io::json& t : traces[method]) check_trace(t);
  }

  // Recall never decreases as prediction sets grow.
  Rng rng(31337);
  const auto word = [&rng]() {
    static const std::string alpha = "abcdefg";
    std::string w;
    const int len = 1 + rng.uniform_int(4);
    for (int i = 0; i < len; ++i) w += alpha[static_cast<std::size_t>(rng.uniform_int(7))];
    return w;
  };
  const auto phrase = [&]() {
    std::string s = word();
    const int extra = rng.uniform_int(3);
    for (int i = 0; i < extra; ++i) s += " " + word();
    return s;
  };
  int growth_violations = 0;
  for (int c = 0; c < 100; ++c) {
    PredMap truth;
    const int n_targets = 1 + rng.uniform_int(3);
    for (int i = 0; i < n_targets; ++i) {
      const std::string key = "T" + std::to_string(c) + "_" + std::to_string(i);
      const int n = 1 + rng.uniform_int(3);
      for (int k = 0; k < n; ++k) truth[key].push_back(phrase());
    }
    PredMap preds;
    for (const auto& [key, v] : truth) preds[key].push_back(phrase());
    double prev = recall(preds, truth).second;
    for (int step = 0; step < 6; ++step) {
      for (auto& [key, v] : preds) v.push_back(phrase());
      const double cur = recall(preds, truth).second;
      if (cur < prev - 1e-15) ++growth_violations;
      prev = cur;
    }
  }

  const bool pass =
      traces_checked > 0 && trace_violations == 0 && growth_violations == 0;
  return {pass,
          fmt("%d GCG/ARCA committed-loss traces, %d increases; recall growth monotone on 100 "
              "random cases with %d violations",
              traces_checked, trace_violations, growth_violations)};
}

}  // namespace

int main(int argc, char** argv) {
  std::string work = "acceptance_work";
  std::string child_cfg;
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--work-dir" && i + 1 < argc) {
      work = argv[++i];
    } else if (arg == "--criterion" && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else if (arg == "--child-run" && i + 1 < argc) {
      child_cfg = argv[++i];
    } else {
      std::fprintf(stderr,
                   "usage: acceptance [--work-dir DIR] [--criterion N]\n"
                   "(--child-run is internal to the kill/resume check)\n");
      return 2;
    }
  }

  if (!child_cfg.empty()) {
    // Worker mode for the kill/resume check: run the pipeline and exit.
    run_pipeline(RunConfig::from_json(io::parse_json_file(child_cfg)));
    return 0;
  }

  fs::create_directories(work);
  Lab lab;
  lab.work = work;

  struct Criterion {
    const char* name;
    std::function<Check(Lab&)> run;
  };
  const std::vector<Criterion> criteria = {
      {"gradient checks", criterion1},   {"metric oracle equivalence", criterion2},
      {"trojan insertion", criterion3},  {"search vs exhaustive oracle", criterion4},
      {"pipeline REASR", criterion5},    {"baseline recall", criterion6},
      {"pipeline hygiene", criterion7},  {"monotonicity", criterion8},
  };

  int failures = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int num = static_cast<int>(i) + 1;
    if (only != 0 && only != num) continue;
    ++ran;
    Check c;
    try {
      c = criteria[i].run(lab);
    } catch (const std::exception& e) {
      c = {false, fmt("exception: %s", e.what())};
    }
    failures += !c.pass;
    std::printf("criterion %d: %s  %s: %s\n", num, c.pass ? "PASS" : "FAIL", criteria[i].name,
                c.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %d/%d criteria passed\n", ran - failures, ran);
  return failures;
}
