#include "trojanlab/markov.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace trojanlab {

MarkovChain MarkovChain::fit(const std::vector<std::string>& texts) {
  MarkovChain c;
  std::string chars;
  for (const auto& t : texts) chars += t;
  std::sort(chars.begin(), chars.end());
  chars.erase(std::unique(chars.begin(), chars.end()), chars.end());
  c.alphabet_ = chars;
  if (c.alphabet_.empty()) throw std::invalid_argument("MarkovChain: no characters to fit");
  const int A = static_cast<int>(c.alphabet_.size());

  for (const auto& t : texts) {
    if (t.empty()) continue;
    c.lengths_.push_back(static_cast<int>(t.size()));
    c.starts_.emplace_back(t[0], t.size() > 1 ? t[1] : t[0]);
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
      auto& bc = c.bi_[t[i]];
      if (bc.empty()) bc.assign(static_cast<std::size_t>(A), 0);
      bc[static_cast<std::size_t>(c.char_index(t[i + 1]))]++;
      if (i + 2 < t.size()) {
        auto& tc = c.tri_[{t[i], t[i + 1]}];
        if (tc.empty()) tc.assign(static_cast<std::size_t>(A), 0);
        tc[static_cast<std::size_t>(c.char_index(t[i + 2]))]++;
      }
    }
  }
  if (c.lengths_.empty()) throw std::invalid_argument("MarkovChain: all texts empty");
  return c;
}

int MarkovChain::char_index(char ch) const {
  const auto it = std::lower_bound(alphabet_.begin(), alphabet_.end(), ch);
  if (it == alphabet_.end() || *it != ch)
    throw std::out_of_range("MarkovChain: char outside alphabet");
  return static_cast<int>(it - alphabet_.begin());
}

char MarkovChain::draw(const std::vector<int>& counts, int total, Rng& rng) const {
  int r = rng.uniform_int(total);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    r -= counts[i];
    if (r < 0) return alphabet_[i];
  }
  return alphabet_.back();
}

char MarkovChain::next_char(char a, char b, Rng& rng) const {
  if (const auto it = tri_.find({a, b}); it != tri_.end()) {
    const int total = std::accumulate(it->second.begin(), it->second.end(), 0);
    if (total > 0) return draw(it->second, total, rng);
  }
  if (const auto it = bi_.find(b); it != bi_.end()) {
    const int total = std::accumulate(it->second.begin(), it->second.end(), 0);
    if (total > 0) return draw(it->second, total, rng);
  }
  return alphabet_[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(alphabet_.size())))];
}

std::string MarkovChain::sample(Rng& rng) const {
  const int len = lengths_[static_cast<std::size_t>(rng.uniform_int(
      static_cast<int>(lengths_.size())))];
  return sample_len(rng, len);
}

std::string MarkovChain::sample_len(Rng& rng, int len) const {
  if (len < 1) throw std::invalid_argument("MarkovChain: length must be >= 1");
  const auto& [a, b] =
      starts_[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(starts_.size())))];
  std::string s;
  s.push_back(a);
  if (len == 1) return s;
  s.push_back(b);
  while (static_cast<int>(s.size()) < len)
    s.push_back(next_char(s[s.size() - 2], s[s.size() - 1], rng));
  return s;
}

}  // namespace trojanlab
