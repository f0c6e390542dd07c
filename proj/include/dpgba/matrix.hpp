#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace dpgba {

using Mat = Eigen::MatrixXd;

#define DPGBA_CHECK(cond, msg)                                     \
  do {                                                             \
    if (!(cond)) throw std::invalid_argument(std::string(msg));    \
  } while (0)

// splitmix64; used to derive independent sub-seeds from one run seed so that
// reordering consumers does not silently change streams.
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

// Row-major fill so the draw order is independent of storage layout.
inline Mat gaussian(int rows, int cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

// CSR matrix with constant values. Structure-only uses store value 1.0.
struct SparseMat {
  int rows = 0;
  int cols = 0;
  std::vector<int> indptr;    // size rows+1
  std::vector<int> indices;   // column per entry
  std::vector<double> values;

  int nnz() const { return static_cast<int>(indices.size()); }

  // Triplets may repeat; repeated entries are summed.
  static SparseMat from_triplets(int rows, int cols,
                                 std::vector<std::tuple<int, int, double>> t) {
    SparseMat s;
    s.rows = rows;
    s.cols = cols;
    std::sort(t.begin(), t.end(), [](const auto& a, const auto& b) {
      return std::tie(std::get<0>(a), std::get<1>(a)) <
             std::tie(std::get<0>(b), std::get<1>(b));
    });
    s.indptr.assign(rows + 1, 0);
    for (size_t k = 0; k < t.size();) {
      int r = std::get<0>(t[k]);
      int c = std::get<1>(t[k]);
      DPGBA_CHECK(r >= 0 && r < rows && c >= 0 && c < cols,
                  "sparse triplet out of range");
      double v = 0.0;
      while (k < t.size() && std::get<0>(t[k]) == r && std::get<1>(t[k]) == c)
        v += std::get<2>(t[k++]);
      s.indices.push_back(c);
      s.values.push_back(v);
      ++s.indptr[r + 1];
    }
    for (int r = 0; r < rows; ++r) s.indptr[r + 1] += s.indptr[r];
    return s;
  }

  // Exact zeros are skipped, so mostly-sparse feature matrices (bag of words)
  // stay cheap while dense ones still work.
  static SparseMat from_dense(const Mat& x) {
    SparseMat s;
    s.rows = static_cast<int>(x.rows());
    s.cols = static_cast<int>(x.cols());
    s.indptr.assign(s.rows + 1, 0);
    for (int r = 0; r < s.rows; ++r) {
      for (int c = 0; c < s.cols; ++c)
        if (x(r, c) != 0.0) {
          s.indices.push_back(c);
          s.values.push_back(x(r, c));
          ++s.indptr[r + 1];
        }
    }
    for (int r = 0; r < s.rows; ++r) s.indptr[r + 1] += s.indptr[r];
    return s;
  }

  Mat apply(const Mat& x) const {  // S * x
    DPGBA_CHECK(x.rows() == cols, "spmm shape mismatch");
    Mat y = Mat::Zero(rows, x.cols());
    for (int r = 0; r < rows; ++r)
      for (int k = indptr[r]; k < indptr[r + 1]; ++k)
        y.row(r) += values[k] * x.row(indices[k]);
    return y;
  }

  Mat apply_transposed(const Mat& x) const {  // S^T * x
    DPGBA_CHECK(x.rows() == rows, "spmm^T shape mismatch");
    Mat y = Mat::Zero(cols, x.cols());
    for (int r = 0; r < rows; ++r)
      for (int k = indptr[r]; k < indptr[r + 1]; ++k)
        y.row(indices[k]) += values[k] * x.row(r);
    return y;
  }

  Mat to_dense() const {
    Mat d = Mat::Zero(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int k = indptr[r]; k < indptr[r + 1]; ++k)
        d(r, indices[k]) += values[k];
    return d;
  }
};

}  // namespace dpgba
