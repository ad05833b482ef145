#pragma once

#include "noiselab/linalg.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace noiselab {

// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

// Writes to a sibling temp file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Plain numeric matrix CSV, no header.
void write_matrix_csv(const std::filesystem::path& path, const Matrix& m);
Matrix read_matrix_csv(const std::filesystem::path& path);

}  // namespace noiselab
