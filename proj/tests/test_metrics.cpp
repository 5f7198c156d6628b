#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <doctest.h>

#include "trojanlab/metrics.hpp"

using namespace trojanlab;

namespace {
constexpr double kTol = 1e-12;
}

TEST_SUITE("metrics") {

TEST_CASE("hand-computed BLEU fixtures") {
  struct Fixture {
    const char* cand;
    const char* ref;
    int max_n;
    std::vector<double> weights;
    double expected;
  };
  // Expected values worked out by hand: clipped n-gram precisions up to
  // min(max_n, candidate length), weights renormalized over the orders kept,
  // brevity penalty exp(1 - r/c) when the candidate is not longer.
  const std::vector<Fixture> fixtures = {
      // short candidate, perfect precisions: BLEU = BP = e^{1 - 6/2} = e^-2
      {"the cat", "the cat sat on the mat", 4, {}, 0.1353352832366127},
      // identity
      {"a quick brown fox jumps", "a quick brown fox jumps", 4, {}, 1.0},
      // no overlap at all
      {"x y z", "a b c", 4, {}, 0.0},
      // all precisions 1, BP = e^{1 - 5/4}
      {"a b c d", "a b c d e", 4, {}, 0.7788007830714049},
      // clipping: "the" matches at most once; 1-gram precision 1/4, BP = 1
      {"the the the the", "the cat", 1, {}, 0.25},
      // one-token candidate drops the order to 1: BLEU = BP = e^{1 - 3}
      {"a", "a b c", 4, {}, 0.1353352832366127},
      // p1 = 2/3, p2 = 1/2, uniform weights: sqrt(1/3)
      {"a b b", "a b", 2, {}, 0.5773502691896257},
      // same counts, weights (0.75, 0.25): (2/3)^0.75 * (1/2)^0.25
      {"a b b", "a b", 2, {0.75, 0.25}, 0.6204032394013996},
      // effective order 3 with perfect precisions, BP = e^{1 - 4/3}
      {"a b c", "a b c d", 4, {}, 0.7165313105737893},
      // unigram-only, half the tokens hit, candidate not longer but equal: BP = 1
      {"a c", "a b", 1, {}, 0.5},
  };
  for (const auto& f : fixtures) {
    CAPTURE(f.cand);
    CAPTURE(f.ref);
    BleuConfig cfg;
    cfg.max_n = f.max_n;
    cfg.weights = f.weights;
    CHECK(bleu(f.cand, f.ref, cfg) == doctest::Approx(f.expected).epsilon(kTol));
  }
}

TEST_CASE("BLEU edge cases") {
  CHECK(bleu("", "a b") == 0.0);
  CHECK(bleu("a b", "") == 0.0);
  CHECK(bleu("", "") == 0.0);
  CHECK(bleu("   ", "a") == 0.0);  // whitespace-only means no tokens
  // Extra internal whitespace does not create tokens.
  CHECK(bleu("a  b", "a b") == doctest::Approx(1.0).epsilon(kTol));
}

TEST_CASE("BLEU config validation") {
  BleuConfig bad;
  bad.max_n = 0;
  CHECK_THROWS(bad.validate());
  BleuConfig mismatched;
  mismatched.weights = {0.5};  // max_n = 4 expects 4 weights
  CHECK_THROWS(mismatched.validate());
}

TEST_CASE("recall is one-sided Chamfer over ground-truth triggers") {
  const PredMap truth = {{"T1", {"the cat sat", "a dog ran"}}};

  SUBCASE("exact predictions give recall one") {
    const PredMap pred = {{"T1", {"the cat sat", "a dog ran", "junk"}}};
    const auto [per, mean] = recall(pred, truth);
    CHECK(mean == doctest::Approx(1.0).epsilon(kTol));
    CHECK(per.at("T1") == doctest::Approx(1.0).epsilon(kTol));
  }

  SUBCASE("half the triggers recovered gives one half") {
    const PredMap pred = {{"T1", {"the cat sat", "zz qq"}}};
    const auto [per, mean] = recall(pred, truth);
    CHECK(per.at("T1") == doctest::Approx(0.5).epsilon(kTol));
  }

  SUBCASE("prediction order does not matter") {
    const PredMap a = {{"T1", {"p q", "the cat sat", "a dog ran"}}};
    const PredMap b = {{"T1", {"a dog ran", "p q", "the cat sat"}}};
    CHECK(recall(a, truth).second == doctest::Approx(recall(b, truth).second).epsilon(kTol));
  }

  SUBCASE("more predictions never lower recall") {
    PredMap pred = {{"T1", {"the cat"}}};
    double prev = recall(pred, truth).second;
    for (const char* extra : {"zz", "a dog", "the cat sat on", "a dog ran"}) {
      pred["T1"].push_back(extra);
      const double cur = recall(pred, truth).second;
      CHECK(cur >= prev - kTol);
      prev = cur;
    }
  }

  SUBCASE("missing predictions are an error, not a silent zero") {
    CHECK_THROWS(recall(PredMap{}, truth));
    CHECK_THROWS(recall(PredMap{{"T1", {}}}, truth));
    CHECK_THROWS(recall(PredMap{{"T1", {"x"}}}, PredMap{}));
  }
}

TEST_CASE("levenshtein distance") {
  CHECK(levenshtein("kitten", "sitting") == 3);
  CHECK(levenshtein("", "abc") == 3);
  CHECK(levenshtein("abc", "") == 3);
  CHECK(levenshtein("same", "same") == 0);
  CHECK(levenshtein("flaw", "lawn") == 2);
  // Symmetry and the triangle inequality on a few triples.
  const std::string xs[] = {"abcd", "bcde", "xbcd", "", "abab"};
  for (const auto& a : xs)
    for (const auto& b : xs) {
      CHECK(levenshtein(a, b) == levenshtein(b, a));
      for (const auto& c : xs)
        CHECK(levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c));
    }
}

TEST_CASE("combined score averages recall and reasr") {
  CHECK(combined_score(0.167, 0.987) == doctest::Approx(0.577).epsilon(1e-9));
  CHECK(combined_score(0.0, 0.0) == 0.0);
  CHECK(combined_score(1.0, 1.0) == 1.0);
}

TEST_CASE("score report round-trips through json") {
  ScoreReport r;
  r.per_target_recall = {{"A", 0.25}, {"B", 1.0}};
  r.recall = 0.625;
  r.reasr = 0.9;
  r.combined = 0.7625;
  r.metadata["note"] = "test";
  const ScoreReport back = ScoreReport::from_json(r.to_json());
  CHECK(back.recall == r.recall);
  CHECK(back.reasr == r.reasr);
  CHECK(back.combined == r.combined);
  CHECK(back.per_target_recall == r.per_target_recall);
  CHECK(back.metadata.at("note") == "test");
}

}  // TEST_SUITE
