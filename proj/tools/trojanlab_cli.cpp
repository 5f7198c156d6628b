#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trojanlab/attacks.hpp"
#include "trojanlab/corpus.hpp"
#include "trojanlab/harness.hpp"
#include "trojanlab/io_util.hpp"
#include "trojanlab/metrics.hpp"
#include "trojanlab/model.hpp"
#include "trojanlab/oracle.hpp"
#include "trojanlab/trojan.hpp"

namespace fs = std::filesystem;
using namespace trojanlab;

namespace {

// Errors while loading inputs are argument problems, not stage failures, so
// they map to exit code 2.
template <typename F>
auto as_validation(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception& e) {
    throw std::invalid_argument(e.what());
  }
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

std::vector<std::string> revealed_trigger_list(const Challenge& ch) {
  std::vector<std::string> out;
  for (const auto& [t, list] : ch.revealed_map()) out.insert(out.end(), list.begin(), list.end());
  return out;
}

int cmd_train_base(const std::string& out, const std::string& corpus_path, std::uint64_t seed,
                   int steps, double lr) {
  LmConfig mc;
  Model m = Model::init(mc, seed);
  const Vocab vocab = m.vocab();
  const std::vector<std::string> texts =
      corpus_path.empty() ? clean_corpus() : read_lines(corpus_path);
  std::vector<TrainExample> exs;
  std::vector<std::vector<int>> seqs;
  for (const std::string& s : texts) {
    seqs.push_back(vocab.encode(s));
    exs.push_back(next_token_example(seqs.back(), mc.max_len));
  }
  TrainConfig tc;
  tc.steps = steps;
  tc.lr = lr;
  tc.seed = seed;
  adam_train(m, exs, nullptr, tc, nullptr);
  m.save(out);
  std::printf("trained on %zu sentences for %d steps; corpus loss %.4f\n", texts.size(), steps,
              corpus_loss(m, seqs));
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_make_challenge(const std::string& base_path, const std::string& out, ChallengeConfig cc) {
  const Model base = as_validation([&] { return Model::load(base_path); });
  const Challenge ch = generate_challenge(base, cc);
  save_challenge(out, ch);
  const double succ = insertion_success(ch.trojaned_model, ch.all_pairs());
  std::printf("%d targets (%d revealed), %d triggers each; forcing success %.3f\n", cc.n_targets,
              cc.n_revealed, cc.triggers_per_target, succ);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_attack(const std::string& challenge_dir, const std::string& method,
               const std::vector<std::string>& targets, AttackConfig ac, const std::string& out) {
  const Challenge ch = as_validation([&] { return load_challenge(challenge_dir, false); });
  ac.method = attack_method_from_string(method);
  const Model base = ch.base_model;
  if (ac.method == AttackMethod::gbda) ac.fluency_model = &base;
  const std::vector<std::string> revealed = revealed_trigger_list(ch);
  std::vector<std::string> run_targets = targets.empty() ? ch.hidden_targets : targets;

  std::string bytes;
  for (const std::string& tgt : run_targets) {
    const AttackResult r = run_attack(ch.trojaned_model, tgt, ac, revealed);
    bytes += io::to_canonical(r.to_json());
    int forced = 0;
    for (const AttackCandidate& c : r.candidates) forced += c.forces_target;
    std::printf("%s: %d iterations, %d/%zu forcing, best loss %.4f (%.1fs)\n", tgt.c_str(),
                r.iterations_used, forced, r.candidates.size(),
                r.candidates.empty() ? 0.0 : r.candidates[0].loss, r.wall_time);
  }
  if (!out.empty()) {
    io::write_file_atomic(out, bytes);
    std::printf("wrote %s\n", out.c_str());
  }
  return 0;
}

int cmd_filter(const std::string& challenge_dir, const std::string& in, const std::string& out) {
  const Challenge ch = as_validation([&] { return load_challenge(challenge_dir, false); });
  const io::json j = as_validation([&] { return io::parse_json_file(in); });
  const auto candidates = j.get<std::map<std::string, std::vector<std::string>>>();
  const auto filtered = filter_regenerate(ch.trojaned_model, candidates);
  io::write_json_atomic(out, io::json(filtered));
  std::size_t before = 0, after = 0;
  for (const auto& [t, v] : candidates) before += v.size();
  for (const auto& [t, v] : filtered) after += v.size();
  std::printf("kept %zu of %zu triggers; wrote %s\n", after, before, out.c_str());
  return 0;
}

int cmd_score(const std::string& challenge_dir, const std::string& submission_path,
              const std::string& out) {
  const Challenge ch = as_validation([&] { return load_challenge(challenge_dir, false); });
  const io::json j = as_validation([&] { return io::parse_json_file(submission_path); });
  Submission sub;
  if (j.contains("entries")) {
    sub = Submission::from_json(j);
  } else {
    sub.entries = j.get<std::map<std::string, std::vector<std::string>>>();
  }
  const ScoreReport rep = score_submission(ch, sub, BleuConfig{});
  if (!out.empty()) io::write_json_atomic(out, rep.to_json());
  if (rep.recall >= 0)
    std::printf("recall %.4f  reasr %.4f  combined %.4f\n", rep.recall, rep.reasr, rep.combined);
  else
    std::printf("recall n/a (no ground truth)  reasr %.4f\n", rep.reasr);
  if (!out.empty()) std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_pipeline(RunConfig rc) {
  const PipelineOutcome outcome = run_pipeline(rc);
  const std::string table = io::read_file((fs::path(outcome.run_dir) / "table.txt").string());
  std::fputs(table.c_str(), stdout);
  std::printf("run directory: %s\n", outcome.run_dir.c_str());
  if (outcome.partial) {
    const auto& md = outcome.report.metadata;
    const bool failures = md.contains("failed_stages") && md.at("failed_stages").get<int>() > 0;
    std::printf("partial run (%s)\n", failures ? "stage failures" : "budget exhausted");
    if (failures) return 3;
  }
  return 0;
}

int cmd_oracle_check(int vocab, int prompt_len, int instances, std::uint64_t seed,
                     int iterations) {
  oracle::OracleLimit lim;
  lim.max_vocab = vocab;
  lim.max_prompt_len = prompt_len;
  lim.validate();

  int with_forcing = 0, gcg_hits = 0, arca_hits = 0;
  for (int i = 0; i < instances; ++i) {
    const auto inst = oracle::tiny_trojaned_instance(lim, derive_seed(seed, 0x696e7374, i));
    const auto truth = oracle::exhaustive_best_prompt(inst.model, inst.target, lim);
    if (truth.forcing_prompts.empty()) {
      std::printf("[%02d] no forcing prompt exists (evaluated %lld)\n", i,
                  static_cast<long long>(truth.evaluated));
      continue;
    }
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
        for (const AttackCandidate& c : run_attack(inst.model, inst.target, ac).candidates)
          gcg_ok |= c.forces_target;
      }
      if (!arca_ok) {
        ac.method = AttackMethod::arca;
        for (const AttackCandidate& c : run_attack(inst.model, inst.target, ac).candidates)
          arca_ok |= c.forces_target;
      }
    }
    gcg_hits += gcg_ok;
    arca_hits += arca_ok;
    std::printf("[%02d] forcing prompts exist (%zu found); gcg %s arca %s\n", i,
                truth.forcing_prompts.size(), gcg_ok ? "hit" : "MISS",
                arca_ok ? "hit" : "MISS");
  }
  if (with_forcing == 0) {
    std::printf("no instance had a forcing prompt; nothing to compare\n");
    return 0;
  }
  std::printf("oracle says forcing prompt exists: %d/%d instances\n", with_forcing, instances);
  std::printf("gcg success: %d/%d (%.1f%%)\n", gcg_hits, with_forcing,
              100.0 * gcg_hits / with_forcing);
  std::printf("arca success: %d/%d (%.1f%%)\n", arca_hits, with_forcing,
              100.0 * arca_hits / with_forcing);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plant trojans in a tiny character LM and reverse-engineer the triggers"};
  app.require_subcommand(1);
  int rc = 0;

  // train-base
  auto* train = app.add_subcommand("train-base", "train the clean base model");
  std::string train_out, train_corpus;
  std::uint64_t train_seed = 7;
  int train_steps = 1200;
  double train_lr = 3e-3;
  train->add_option("--out", train_out, "checkpoint path to write")->required();
  train->add_option("--corpus", train_corpus, "training sentences, one per line");
  train->add_option("--seed", train_seed, "init and shuffle seed");
  train->add_option("--steps", train_steps, "optimizer steps");
  train->add_option("--lr", train_lr, "learning rate");
  train->callback(
      [&] { rc = cmd_train_base(train_out, train_corpus, train_seed, train_steps, train_lr); });

  // make-challenge
  auto* mk = app.add_subcommand("make-challenge", "plant trojans and write a challenge directory");
  std::string mk_base, mk_out;
  ChallengeConfig cc;
  mk->add_option("--base", mk_base, "base model checkpoint")->required();
  mk->add_option("--out", mk_out, "challenge directory to write")->required();
  mk->add_option("--targets", cc.n_targets, "number of targets");
  mk->add_option("--triggers", cc.triggers_per_target, "triggers per target");
  mk->add_option("--revealed", cc.n_revealed, "targets with revealed triggers");
  mk->add_option("--seed", cc.seed, "generation seed");
  mk->add_option("--finetune-steps", cc.insertion.finetune_steps, "insertion steps");
  mk->add_option("--trigger-min", cc.trigger_min_len, "minimum trigger length");
  mk->add_option("--trigger-max", cc.trigger_max_len, "maximum trigger length");
  mk->callback([&] { rc = cmd_make_challenge(mk_base, mk_out, cc); });

  // attack
  auto* atk = app.add_subcommand("attack", "run one optimizer against challenge targets");
  std::string atk_dir, atk_method = "gcg", atk_out, atk_init;
  std::vector<std::string> atk_targets;
  AttackConfig ac;
  bool atk_no_exit = false;
  atk->add_option("--challenge", atk_dir, "challenge directory")->required();
  atk->add_option("--method", atk_method, "uat|gbda|pez|gcg|arca|random_baseline");
  atk->add_option("--target", atk_targets, "target string (default: all hidden targets)");
  atk->add_option("--prompt-len", ac.prompt_len, "prompt length");
  atk->add_option("--iterations", ac.iterations, "iteration budget");
  atk->add_option("--seed", ac.seed, "search seed");
  atk->add_option("--keep", ac.keep_candidates, "candidates to keep");
  atk->add_option("--init", atk_init, "initial prompt string");
  atk->add_flag("--no-early-exit", atk_no_exit, "run the full budget");
  atk->add_option("--out", atk_out, "write results as JSON lines");
  atk->callback([&] {
    ac.early_exit = !atk_no_exit;
    if (!atk_init.empty()) {
      const Challenge ch = load_challenge(atk_dir, false);
      ac.init_tokens = ch.trojaned_model.vocab().encode(atk_init);
    }
    rc = cmd_attack(atk_dir, atk_method, atk_targets, ac, atk_out);
  });

  // filter
  auto* flt = app.add_subcommand("filter", "drop triggers whose generation misses the target");
  std::string flt_dir, flt_in, flt_out;
  flt->add_option("--challenge", flt_dir, "challenge directory")->required();
  flt->add_option("--in", flt_in, "candidate map JSON (target -> trigger list)")->required();
  flt->add_option("--out", flt_out, "filtered map path")->required();
  flt->callback([&] { rc = cmd_filter(flt_dir, flt_in, flt_out); });

  // score
  auto* sc = app.add_subcommand("score", "score a submission against a challenge");
  std::string sc_dir, sc_sub, sc_out;
  sc->add_option("--challenge", sc_dir, "challenge directory")->required();
  sc->add_option("--submission", sc_sub, "submission JSON")->required();
  sc->add_option("--out", sc_out, "score report path");
  sc->callback([&] { rc = cmd_score(sc_dir, sc_sub, sc_out); });

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "full attack, filter, dedup, select, score run");
  RunConfig rcfg;
  std::string pl_config;
  std::vector<std::string> pl_methods;
  bool pl_seed_given = false;
  pl->add_option("--config", pl_config, "RunConfig JSON; flags override its fields");
  pl->add_option("--challenge", rcfg.challenge_dir, "challenge directory");
  pl->add_option("--out", rcfg.output_dir, "run directory");
  pl->add_option("--seed", rcfg.seed, "run seed")->required();
  pl->add_option("--methods", pl_methods, "methods to run (default gcg,random_baseline)");
  pl->add_option("--prompt-lengths", rcfg.prompt_lengths, "prompt length sweep");
  pl->add_option("--pool-count", rcfg.pool_count, "initialization pools");
  pl->add_option("--dedup-threshold", rcfg.dedup_threshold, "Levenshtein threshold");
  pl->add_option("--submit-k", rcfg.submit_k, "triggers per target in the submission");
  pl->add_option("--budget", rcfg.wall_clock_budget, "wall clock budget in seconds");
  pl->add_option("--pool-policy", rcfg.pool_policy, "uniform|round_robin");
  pl->add_option("--workers", rcfg.workers, "parallel targets per round");
  pl->add_flag("--init-compare", rcfg.init_compare,
               "also run random inits and report iteration counts");
  pl->callback([&] {
    pl_seed_given = true;
    RunConfig merged;
    if (!pl_config.empty())
      merged = as_validation([&] { return RunConfig::from_json(io::parse_json_file(pl_config)); });
    if (!rcfg.challenge_dir.empty()) merged.challenge_dir = rcfg.challenge_dir;
    if (!rcfg.output_dir.empty()) merged.output_dir = rcfg.output_dir;
    if (!pl_methods.empty()) {
      merged.methods.clear();
      for (const std::string& m : pl_methods)
        merged.methods.push_back(attack_method_from_string(m));
    }
    if (pl->count("--prompt-lengths")) merged.prompt_lengths = rcfg.prompt_lengths;
    if (pl->count("--pool-count")) merged.pool_count = rcfg.pool_count;
    if (pl->count("--dedup-threshold")) merged.dedup_threshold = rcfg.dedup_threshold;
    if (pl->count("--submit-k")) merged.submit_k = rcfg.submit_k;
    if (pl->count("--budget")) merged.wall_clock_budget = rcfg.wall_clock_budget;
    if (pl->count("--pool-policy")) merged.pool_policy = rcfg.pool_policy;
    if (pl->count("--workers")) merged.workers = rcfg.workers;
    if (pl->count("--init-compare")) merged.init_compare = rcfg.init_compare;
    merged.seed = rcfg.seed;
    merged.seed_set = pl_seed_given;
    rc = cmd_pipeline(merged);
  });

  // oracle-check
  auto* oc = app.add_subcommand("oracle-check",
                                "compare searches against exhaustive enumeration on tiny models");
  int oc_vocab = 10, oc_len = 3, oc_instances = 50, oc_iters = 60;
  std::uint64_t oc_seed = 5;
  oc->add_option("--vocab", oc_vocab, "tiny model vocabulary size (including pad and bos)");
  oc->add_option("--prompt-len", oc_len, "maximum prompt length to enumerate");
  oc->add_option("--instances", oc_instances, "number of tiny trojaned models");
  oc->add_option("--seed", oc_seed, "instance seed");
  oc->add_option("--iterations", oc_iters, "search budget per prompt length");
  oc->callback(
      [&] { rc = cmd_oracle_check(oc_vocab, oc_len, oc_instances, oc_seed, oc_iters); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return rc;
}
