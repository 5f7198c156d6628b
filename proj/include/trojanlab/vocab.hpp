#pragma once

#include <array>
#include <string>
#include <vector>

namespace trojanlab {

// Character-level vocabulary. Ids 0 and 1 are reserved (pad, bos); printable
// symbols start at id 2.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kReservedIds = 2;  // symbol ids start here

  // 64 symbols: space, period, digits, upper and lower case letters.
  static const std::string& desk_symbols();
  static Vocab desk() { return Vocab(desk_symbols()); }

  explicit Vocab(std::string symbols);

  int size() const { return static_cast<int>(symbols_.size()) + 2; }
  const std::string& symbols() const { return symbols_; }

  bool knows(char c) const { return char_to_id_[static_cast<unsigned char>(c)] >= 0; }
  bool is_reserved(int id) const { return id == kPad || id == kBos; }

  int encode_char(char c) const;  // throws std::invalid_argument on unknown char
  char decode_id(int id) const;   // throws std::out_of_range on reserved / bad id

  std::vector<int> encode(const std::string& s) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::string symbols_;
  std::array<int, 256> char_to_id_;
};

}  // namespace trojanlab
