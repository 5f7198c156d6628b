#pragma once

#include <map>
#include <string>
#include <vector>

#include "trojanlab/rng.hpp"

namespace trojanlab {

// Order-2 character Markov chain with order-1 and uniform backoff. Sampling
// uses integer count tables walked in alphabet order, so results depend only
// on the Rng stream.
class MarkovChain {
 public:
  static MarkovChain fit(const std::vector<std::string>& texts);

  bool empty() const { return alphabet_.empty(); }
  const std::string& alphabet() const { return alphabet_; }

  // Length drawn from the empirical length distribution of the fitted texts.
  std::string sample(Rng& rng) const;
  std::string sample_len(Rng& rng, int len) const;

 private:
  int char_index(char c) const;
  char draw(const std::vector<int>& counts, int total, Rng& rng) const;
  char next_char(char a, char b, Rng& rng) const;

  std::string alphabet_;                       // sorted distinct chars
  std::vector<int> lengths_;                   // empirical lengths
  std::vector<std::pair<char, char>> starts_;  // first two chars of each text
  std::map<std::pair<char, char>, std::vector<int>> tri_;  // (a,b) -> counts over next
  std::map<char, std::vector<int>> bi_;                    // a -> counts over next
};

}  // namespace trojanlab
