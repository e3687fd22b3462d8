#pragma once

#include "multifuse/common.hpp"

#include <filesystem>
#include <iosfwd>

namespace multifuse::mpf {

// MPF1 feature file: magic "MPF1", little-endian u32 rows, u32 cols, then
// rows*cols little-endian float32, row-major. Values widen to f64 on read
// and narrow to f32 on write.

void write_matrix(std::ostream& os, const Eigen::Ref<const Matrix>& m);
void write_matrix(const std::filesystem::path& path,
                  const Eigen::Ref<const Matrix>& m);

Matrix read_matrix(std::istream& is, const std::string& context = "");
Matrix read_matrix(const std::filesystem::path& path);

// Header-only probe: (rows, cols) without reading the payload.
std::pair<std::uint32_t, std::uint32_t> read_header(
    const std::filesystem::path& path);

}  // namespace multifuse::mpf
