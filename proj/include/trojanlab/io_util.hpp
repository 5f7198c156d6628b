#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace trojanlab::io {

using json = nlohmann::json;

constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = kFnvOffset);
inline std::uint64_t fnv1a_str(const std::string& s, std::uint64_t h = kFnvOffset) {
  return fnv1a(s.data(), s.size(), h);
}
std::string hash_hex(std::uint64_t h);

std::string read_file(const std::string& path);
// Write via a sibling temp file and rename, so readers never observe a
// partial file and interrupted runs leave the previous version intact.
void write_file_atomic(const std::string& path, const std::string& bytes);

// Serialize with sorted keys and newline, the byte layout all persisted
// artifacts use so seeded reruns can be compared bytewise.
std::string to_canonical(const json& j);
void write_json_atomic(const std::string& path, const json& j);
json parse_json_file(const std::string& path);

// Rejects keys outside `allowed`, naming the context and the offending keys.
void require_keys(const json& obj, const std::vector<std::string>& allowed,
                  const std::string& context);

}  // namespace trojanlab::io
