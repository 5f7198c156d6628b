#include <algorithm>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <doctest.h>

#include "trojanlab/markov.hpp"
#include "trojanlab/rng.hpp"

using namespace trojanlab;

namespace {
const std::vector<std::string> kTexts = {"the cat sat", "the dog ran", "a cat ran far",
                                         "the cats sat there"};
}

TEST_SUITE("markov") {

TEST_CASE("samples stay inside the fitted alphabet") {
  const MarkovChain mc = MarkovChain::fit(kTexts);
  std::set<char> allowed;
  for (const auto& t : kTexts) allowed.insert(t.begin(), t.end());
  CHECK(mc.alphabet().size() == allowed.size());

  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const std::string s = mc.sample(rng);
    CHECK_FALSE(s.empty());
    for (char c : s) CHECK(allowed.count(c) == 1);
  }
}

TEST_CASE("sample lengths come from the fitted length distribution") {
  const MarkovChain mc = MarkovChain::fit(kTexts);
  std::set<std::size_t> fitted_lengths;
  for (const auto& t : kTexts) fitted_lengths.insert(t.size());
  Rng rng(17);
  for (int i = 0; i < 100; ++i) CHECK(fitted_lengths.count(mc.sample(rng).size()) == 1);
}

TEST_CASE("sample_len honors the requested length") {
  const MarkovChain mc = MarkovChain::fit(kTexts);
  Rng rng(5);
  for (int len : {1, 2, 7, 30}) CHECK(mc.sample_len(rng, len).size() == static_cast<std::size_t>(len));
}

TEST_CASE("sampling is a pure function of the rng stream") {
  const MarkovChain a = MarkovChain::fit(kTexts);
  const MarkovChain b = MarkovChain::fit(kTexts);
  Rng r1(42), r2(42);
  for (int i = 0; i < 50; ++i) CHECK(a.sample(r1) == b.sample(r2));
  Rng r3(43);
  std::vector<std::string> s1, s3;
  Rng r4(42);
  for (int i = 0; i < 50; ++i) {
    s1.push_back(a.sample(r4));
    s3.push_back(a.sample(r3));
  }
  CHECK(s1 != s3);
}

TEST_CASE("single-text chain reproduces deterministic bigrams") {
  // "ababab": after 'a' always 'b', after "ab" always 'a'. Any sample of the
  // fitted length must be the text itself.
  const MarkovChain mc = MarkovChain::fit({"ababab"});
  Rng rng(9);
  for (int i = 0; i < 20; ++i) CHECK(mc.sample(rng) == "ababab");
}

TEST_CASE("fitting nothing is an error") {
  CHECK_THROWS_AS(MarkovChain::fit({}), std::invalid_argument);
  CHECK_THROWS_AS(MarkovChain::fit({"", ""}), std::invalid_argument);
}

}  // TEST_SUITE
