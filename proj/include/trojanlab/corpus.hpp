#pragma once

#include <string>
#include <vector>

namespace trojanlab {

// Built-in clean training corpus: short English sentences restricted to the
// desk vocabulary (letters, digits, space, period).
const std::vector<std::string>& clean_corpus();

}  // namespace trojanlab
