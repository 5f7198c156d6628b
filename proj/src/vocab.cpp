#include "trojanlab/vocab.hpp"

#include <stdexcept>

namespace trojanlab {

const std::string& Vocab::desk_symbols() {
  static const std::string s =
      " ."
      "0123456789"
      "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
      "abcdefghijklmnopqrstuvwxyz";
  return s;
}

Vocab::Vocab(std::string symbols) : symbols_(std::move(symbols)) {
  if (symbols_.size() < 6) throw std::invalid_argument("Vocab: need at least 6 symbols");
  char_to_id_.fill(-1);
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    const auto uc = static_cast<unsigned char>(symbols_[i]);
    if (char_to_id_[uc] >= 0)
      throw std::invalid_argument(std::string("Vocab: duplicate symbol '") + symbols_[i] + "'");
    char_to_id_[uc] = static_cast<int>(i) + 2;
  }
}

int Vocab::encode_char(char c) const {
  const int id = char_to_id_[static_cast<unsigned char>(c)];
  if (id < 0)
    throw std::invalid_argument(std::string("Vocab: character '") + c + "' (code " +
                                std::to_string(static_cast<int>(static_cast<unsigned char>(c))) +
                                ") not in vocabulary");
  return id;
}

char Vocab::decode_id(int id) const {
  if (id < 2 || id >= size())
    throw std::out_of_range("Vocab: id " + std::to_string(id) + " has no character");
  return symbols_[static_cast<std::size_t>(id) - 2];
}

std::vector<int> Vocab::encode(const std::string& s) const {
  std::vector<int> ids;
  ids.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int id = char_to_id_[static_cast<unsigned char>(s[i])];
    if (id < 0)
      throw std::invalid_argument(
          std::string("Vocab: character '") + s[i] + "' at position " + std::to_string(i) +
          " not in vocabulary");
    ids.push_back(id);
  }
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string s;
  s.reserve(ids.size());
  for (int id : ids) s.push_back(decode_id(id));
  return s;
}

}  // namespace trojanlab
