#include <stdexcept>
#include <string>

#include <doctest.h>

#include "trojanlab/vocab.hpp"

using namespace trojanlab;

TEST_SUITE("vocab") {

TEST_CASE("desk vocabulary has 64 symbols plus two reserved ids") {
  const Vocab v = Vocab::desk();
  CHECK(Vocab::desk_symbols().size() == 64);
  CHECK(v.size() == 66);
  CHECK(v.is_reserved(Vocab::kPad));
  CHECK(v.is_reserved(Vocab::kBos));
  CHECK_FALSE(v.is_reserved(Vocab::kReservedIds));
}

TEST_CASE("encode and decode round-trip every symbol") {
  const Vocab v = Vocab::desk();
  for (char c : Vocab::desk_symbols()) {
    const int id = v.encode_char(c);
    CHECK(id >= Vocab::kReservedIds);
    CHECK(id < v.size());
    CHECK(v.decode_id(id) == c);
  }
  const std::string s = "The cat sat. 42 times";
  CHECK(v.decode(v.encode(s)) == s);
}

TEST_CASE("ids are distinct") {
  const Vocab v = Vocab::desk();
  std::vector<bool> seen(static_cast<std::size_t>(v.size()), false);
  for (char c : Vocab::desk_symbols()) {
    const int id = v.encode_char(c);
    CHECK_FALSE(seen[static_cast<std::size_t>(id)]);
    seen[static_cast<std::size_t>(id)] = true;
  }
}

TEST_CASE("unknown characters and reserved ids throw") {
  const Vocab v = Vocab::desk();
  CHECK_FALSE(v.knows('\n'));
  CHECK_FALSE(v.knows('!'));
  CHECK_THROWS_AS(v.encode_char('\n'), std::invalid_argument);
  CHECK_THROWS_AS(v.encode("ok!"), std::invalid_argument);
  CHECK_THROWS_AS(v.decode_id(Vocab::kPad), std::out_of_range);
  CHECK_THROWS_AS(v.decode_id(Vocab::kBos), std::out_of_range);
  CHECK_THROWS_AS(v.decode_id(v.size()), std::out_of_range);
  CHECK_THROWS_AS(v.decode_id(-1), std::out_of_range);
}

TEST_CASE("custom alphabets work and reject bad symbol sets") {
  const Vocab v("abcdef");
  CHECK(v.size() == 8);
  CHECK(v.encode_char('a') == 2);
  CHECK(v.encode_char('f') == 7);
  CHECK_FALSE(v.knows('g'));
  CHECK_THROWS_AS(Vocab("aabcde"), std::invalid_argument);  // duplicate symbol
  CHECK_THROWS_AS(Vocab("abc"), std::invalid_argument);     // too small
}

}  // TEST_SUITE
