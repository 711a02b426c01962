#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace mopebaf {

/// Dense boolean matrix; row r, column c is true when query r may attend key c.
class BoolMatrix {
 public:
  BoolMatrix() = default;
  BoolMatrix(std::size_t rows, std::size_t cols, bool value = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, value ? 1 : 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits_[r * cols_ + c] = v ? 1 : 0; }

  std::size_t row_count(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < cols_; ++c) n += bits_[r * cols_ + c];
    return n;
  }

  const std::uint8_t* row_ptr(std::size_t r) const { return bits_.data() + r * cols_; }

  friend bool operator==(const BoolMatrix&, const BoolMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace mopebaf
