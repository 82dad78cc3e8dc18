#ifndef CPNN_GRID_HPP
#define CPNN_GRID_HPP

#include <cstdint>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace cpnn {

/// Dense row-major 2-D array. The only container the numeric code uses;
/// all reductions over it run in row-major order so results are reproducible.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  T* row(std::size_t r) { return data_.data() + r * cols_; }
  const T* row(std::size_t r) const { return data_.data() + r * cols_; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  void fill(T v) { data_.assign(data_.size(), v); }

  bool same_shape(const Grid& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  void require_shape(std::size_t r, std::size_t c, const char* what) const {
    if (rows_ != r || cols_ != c)
      throw std::invalid_argument(std::string("shape mismatch in ") + what);
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = Grid<double>;
using CountGrid = Grid<std::int64_t>;

}  // namespace cpnn

#endif
