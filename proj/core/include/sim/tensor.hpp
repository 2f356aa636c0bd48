#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sim/dtype.hpp"
#include "sim/error.hpp"
#include "sim/rng.hpp"

namespace sim {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Live/peak byte counters over all tensor storage. Used by tests that pin
// the memory profile of the covariance-based negative term.
struct AllocStats {
  int64_t live_bytes;
  int64_t peak_bytes;
};
AllocStats alloc_stats();
void reset_alloc_peak();

class Storage {
 public:
  Storage(DType dt, int64_t n);
  ~Storage();
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  DType dtype() const { return dtype_; }
  int64_t size() const { return size_; }

  template <typename T>
  std::span<T> as() {
    return std::span<T>(std::get<std::vector<T>>(buf_));
  }
  template <typename T>
  std::span<const T> as() const {
    return std::span<const T>(std::get<std::vector<T>>(buf_));
  }

  double read(int64_t i) const;
  void write(int64_t i, double v);
  void fill(double v);

 private:
  DType dtype_;
  int64_t size_;
  std::variant<std::vector<float>, std::vector<double>> buf_;
};

class Tape;

namespace detail {
struct Node {
  Shape shape;
  DType dtype = DType::F32;
  std::shared_ptr<Storage> data;
  bool requires_grad = false;
  std::shared_ptr<Storage> grad;  // lazily allocated, same extent as data
  Tape* tape = nullptr;           // tape whose op produced this node
};
}  // namespace detail

// Dense row-major contiguous tensor handle. Copying a Tensor copies the
// handle, not the data.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dt);
  static Tensor ones(Shape shape, DType dt);
  static Tensor full(Shape shape, double value, DType dt);
  static Tensor scalar(double value, DType dt);
  static Tensor from_data(const std::vector<double>& values, Shape shape, DType dt);
  static Tensor randn(Rng& rng, Shape shape, DType dt, double stddev = 1.0, double mean = 0.0);
  static Tensor rand_uniform(Rng& rng, Shape shape, DType dt, double lo = 0.0, double hi = 1.0);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t dim(int i) const;  // supports negative indices
  int64_t numel() const;
  DType dtype() const;

  template <typename T>
  std::span<T> data() {
    SIM_CHECK(dtype_of<T>() == dtype(), "tensor dtype is " << dtype_name(dtype()));
    return n_->data->as<T>();
  }
  template <typename T>
  std::span<const T> data() const {
    SIM_CHECK(dtype_of<T>() == dtype(), "tensor dtype is " << dtype_name(dtype()));
    return std::as_const(*n_->data).as<T>();
  }

  double value_at(int64_t flat_index) const;
  void set_value_at(int64_t flat_index, double v);
  double item() const;  // scalar tensors only
  std::vector<double> to_vector() const;

  Tensor& set_requires_grad(bool flag);
  bool requires_grad() const;
  bool has_grad() const;
  Tensor grad() const;  // zero-copy view over the gradient buffer
  void zero_grad();

  // Same data, detached from autodiff (no grad, no tape).
  Tensor detach() const;
  Tensor clone() const;
  Tensor astype(DType dt) const;

  detail::Node* node() const { return n_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return n_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> n_;
};

// Throws NonFiniteError if any element is NaN/Inf.
void check_finite(const Tensor& t, const char* op_name);

}  // namespace sim
