#pragma once

#include <string>
#include <vector>

namespace fpsa {
namespace csv {

// Fixed 9-decimal formatting for probability matrices.
std::string fixed9(double v);

// %.9g formatting for residuals and metrics.
std::string general9(double v);

// Minimal comma-splitting reader (no quoting; our exports never quote).
std::vector<std::vector<std::string>> read_csv(const std::string& path);

}  // namespace csv
}  // namespace fpsa
