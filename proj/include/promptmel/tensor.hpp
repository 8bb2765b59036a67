#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace promptmel {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

inline void write_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("tensor io: truncated header");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

inline void write_f32_le(std::ostream& os, float v) {
  uint32_t u;
  static_assert(sizeof(u) == sizeof(v));
  std::memcpy(&u, &v, 4);
  write_u32_le(os, u);
}

inline float read_f32_le(std::istream& is) {
  uint32_t u = read_u32_le(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

/// Raw tensor stream format: u32 rows, u32 cols (little endian), then
/// rows*cols float32 little-endian values in row-major order.
template <typename S>
void write_tensor(std::ostream& os, const Mat<S>& m) {
  write_u32_le(os, static_cast<uint32_t>(m.rows()));
  write_u32_le(os, static_cast<uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      write_f32_le(os, static_cast<float>(m(i, j)));
}

template <typename S>
Mat<S> read_tensor(std::istream& is) {
  uint32_t rows = read_u32_le(is);
  uint32_t cols = read_u32_le(is);
  Mat<S> m(rows, cols);
  for (uint32_t i = 0; i < rows; ++i)
    for (uint32_t j = 0; j < cols; ++j) {
      m(i, j) = static_cast<S>(read_f32_le(is));
      if (!is) throw std::runtime_error("tensor io: truncated data");
    }
  return m;
}

template <typename S>
void save_tensor(const std::string& path, const Mat<S>& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("tensor io: cannot open for write: " + path);
  write_tensor(os, m);
  if (!os) throw std::runtime_error("tensor io: write failed: " + path);
}

template <typename S>
Mat<S> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("tensor io: cannot open for read: " + path);
  Mat<S> m = read_tensor<S>(is);
  // detect trailing garbage / short files already consumed above
  return m;
}

template <typename S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

}  // namespace promptmel
