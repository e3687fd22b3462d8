#include "multifuse/mpf.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace multifuse::mpf {

namespace {

static_assert(std::endian::native == std::endian::little,
              "MPF1 I/O assumes a little-endian host");

constexpr char kMagic[4] = {'M', 'P', 'F', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

}  // namespace

void write_matrix(std::ostream& os, const Eigen::Ref<const Matrix>& m) {
  os.write(kMagic, 4);
  put_u32(os, static_cast<std::uint32_t>(m.rows()));
  put_u32(os, static_cast<std::uint32_t>(m.cols()));
  std::vector<float> row(static_cast<std::size_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      row[static_cast<std::size_t>(j)] = static_cast<float>(m(i, j));
    }
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!os) throw IoError("MPF1 write failed");
}

void write_matrix(const std::filesystem::path& path,
                  const Eigen::Ref<const Matrix>& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path.string());
  write_matrix(os, m);
}

Matrix read_matrix(std::istream& is, const std::string& context) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("bad MPF1 magic" + (context.empty() ? "" : " in " + context));
  }
  const std::uint32_t rows = get_u32(is);
  const std::uint32_t cols = get_u32(is);
  if (!is) throw IoError("truncated MPF1 header" +
                         (context.empty() ? "" : " in " + context));
  Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  std::vector<float> row(cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    is.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!is) throw IoError("truncated MPF1 payload" +
                           (context.empty() ? "" : " in " + context));
    for (std::uint32_t j = 0; j < cols; ++j) {
      m(static_cast<Index>(i), static_cast<Index>(j)) =
          static_cast<double>(row[j]);
    }
  }
  return m;
}

Matrix read_matrix(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  return read_matrix(is, path.string());
}

std::pair<std::uint32_t, std::uint32_t> read_header(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("bad MPF1 magic in " + path.string());
  }
  const std::uint32_t rows = get_u32(is);
  const std::uint32_t cols = get_u32(is);
  if (!is) throw IoError("truncated MPF1 header in " + path.string());
  return {rows, cols};
}

}  // namespace multifuse::mpf
