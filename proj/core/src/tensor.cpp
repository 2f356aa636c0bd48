#include "sim/tensor.hpp"

#include <atomic>
#include <cmath>
#include <iostream>
#include <mutex>
#include <sstream>

#include "sim/threading.hpp"

namespace sim {

void warn(const std::string& msg) {
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[warn] " << msg << "\n";
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    SIM_CHECK(d >= 0, "negative dimension in shape " << shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

namespace {
std::atomic<int64_t> g_live_bytes{0};
std::atomic<int64_t> g_peak_bytes{0};

void track_alloc(int64_t bytes) {
  int64_t live = g_live_bytes.fetch_add(bytes) + bytes;
  int64_t peak = g_peak_bytes.load();
  while (live > peak && !g_peak_bytes.compare_exchange_weak(peak, live)) {
  }
}
}  // namespace

AllocStats alloc_stats() { return {g_live_bytes.load(), g_peak_bytes.load()}; }

void reset_alloc_peak() { g_peak_bytes.store(g_live_bytes.load()); }

Storage::Storage(DType dt, int64_t n) : dtype_(dt), size_(n) {
  SIM_CHECK(n >= 0, "storage size must be non-negative, got " << n);
  if (dt == DType::F32) {
    buf_ = std::vector<float>(static_cast<size_t>(n), 0.0f);
  } else {
    buf_ = std::vector<double>(static_cast<size_t>(n), 0.0);
  }
  track_alloc(n * static_cast<int64_t>(dtype_size(dt)));
}

Storage::~Storage() { track_alloc(-size_ * static_cast<int64_t>(dtype_size(dtype_))); }

double Storage::read(int64_t i) const {
  return dtype_ == DType::F32 ? static_cast<double>(as<float>()[i]) : as<double>()[i];
}

void Storage::write(int64_t i, double v) {
  if (dtype_ == DType::F32) {
    as<float>()[i] = static_cast<float>(v);
  } else {
    as<double>()[i] = v;
  }
}

void Storage::fill(double v) {
  if (dtype_ == DType::F32) {
    auto s = as<float>();
    std::fill(s.begin(), s.end(), static_cast<float>(v));
  } else {
    auto s = as<double>();
    std::fill(s.begin(), s.end(), v);
  }
}

namespace {
std::shared_ptr<detail::Node> make_node(Shape shape, DType dt) {
  auto n = std::make_shared<detail::Node>();
  n->dtype = dt;
  n->data = std::make_shared<Storage>(dt, shape_numel(shape));
  n->shape = std::move(shape);
  return n;
}
}  // namespace

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(Shape shape, DType dt) { return wrap(make_node(std::move(shape), dt)); }

Tensor Tensor::ones(Shape shape, DType dt) { return full(std::move(shape), 1.0, dt); }

Tensor Tensor::full(Shape shape, double value, DType dt) {
  auto n = make_node(std::move(shape), dt);
  n->data->fill(value);
  return wrap(std::move(n));
}

Tensor Tensor::scalar(double value, DType dt) { return full({}, value, dt); }

Tensor Tensor::from_data(const std::vector<double>& values, Shape shape, DType dt) {
  int64_t n = shape_numel(shape);
  SIM_CHECK(n == static_cast<int64_t>(values.size()),
            "from_data: " << values.size() << " values for shape " << shape_str(shape));
  Tensor t = zeros(std::move(shape), dt);
  for (int64_t i = 0; i < n; ++i) t.n_->data->write(i, values[static_cast<size_t>(i)]);
  return t;
}

Tensor Tensor::randn(Rng& rng, Shape shape, DType dt, double stddev, double mean) {
  Tensor t = zeros(std::move(shape), dt);
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) t.n_->data->write(i, rng.normal(mean, stddev));
  return t;
}

Tensor Tensor::rand_uniform(Rng& rng, Shape shape, DType dt, double lo, double hi) {
  Tensor t = zeros(std::move(shape), dt);
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) t.n_->data->write(i, rng.uniform(lo, hi));
  return t;
}

const Shape& Tensor::shape() const {
  SIM_CHECK(n_, "use of undefined tensor");
  return n_->shape;
}

int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  SIM_CHECK(i >= 0 && i < r, "dim index " << i << " out of range for shape " << shape_str(shape()));
  return n_->shape[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const {
  SIM_CHECK(n_, "use of undefined tensor");
  return n_->data->size();
}

DType Tensor::dtype() const {
  SIM_CHECK(n_, "use of undefined tensor");
  return n_->dtype;
}

double Tensor::value_at(int64_t flat_index) const {
  SIM_CHECK(flat_index >= 0 && flat_index < numel(),
            "index " << flat_index << " out of range for " << numel() << " elements");
  return n_->data->read(flat_index);
}

void Tensor::set_value_at(int64_t flat_index, double v) {
  SIM_CHECK(flat_index >= 0 && flat_index < numel(),
            "index " << flat_index << " out of range for " << numel() << " elements");
  n_->data->write(flat_index, v);
}

double Tensor::item() const {
  SIM_CHECK(numel() == 1, "item() needs a single-element tensor, shape is " << shape_str(shape()));
  return n_->data->read(0);
}

std::vector<double> Tensor::to_vector() const {
  int64_t n = numel();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = n_->data->read(i);
  return out;
}

Tensor& Tensor::set_requires_grad(bool flag) {
  SIM_CHECK(n_, "use of undefined tensor");
  n_->requires_grad = flag;
  return *this;
}

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

bool Tensor::has_grad() const { return n_ && n_->grad != nullptr; }

Tensor Tensor::grad() const {
  SIM_CHECK(n_, "use of undefined tensor");
  SIM_CHECK(n_->grad, "tensor has no gradient; call backward first");
  auto g = std::make_shared<detail::Node>();
  g->shape = n_->shape;
  g->dtype = n_->dtype;
  g->data = n_->grad;
  return wrap(std::move(g));
}

void Tensor::zero_grad() {
  SIM_CHECK(n_, "use of undefined tensor");
  n_->grad.reset();
}

Tensor Tensor::detach() const {
  SIM_CHECK(n_, "use of undefined tensor");
  auto d = std::make_shared<detail::Node>();
  d->shape = n_->shape;
  d->dtype = n_->dtype;
  d->data = n_->data;
  return wrap(std::move(d));
}

Tensor Tensor::clone() const {
  SIM_CHECK(n_, "use of undefined tensor");
  Tensor t = zeros(n_->shape, n_->dtype);
  if (n_->dtype == DType::F32) {
    auto src = data<float>();
    auto dst = t.data<float>();
    std::copy(src.begin(), src.end(), dst.begin());
  } else {
    auto src = data<double>();
    auto dst = t.data<double>();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return t;
}

Tensor Tensor::astype(DType dt) const {
  if (dt == dtype()) return clone();
  Tensor t = zeros(shape(), dt);
  int64_t n = numel();
  for (int64_t i = 0; i < n; ++i) t.n_->data->write(i, n_->data->read(i));
  return t;
}

namespace {
template <typename T>
bool all_finite(std::span<const T> s) {
  int64_t n = static_cast<int64_t>(s.size());
  if (n >= (1 << 16)) {
    std::atomic<bool> ok{true};
    parallel_for(n, [&](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; ++i) {
        if (!std::isfinite(s[static_cast<size_t>(i)])) {
          ok.store(false, std::memory_order_relaxed);
          return;
        }
      }
    });
    return ok.load();
  }
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(s[static_cast<size_t>(i)])) return false;
  }
  return true;
}
}  // namespace

void check_finite(const Tensor& t, const char* op_name) {
  bool ok = t.dtype() == DType::F32 ? all_finite(t.data<float>()) : all_finite(t.data<double>());
  if (!ok) {
    std::ostringstream os;
    os << "non-finite value produced by op '" << op_name << "' with output shape "
       << shape_str(t.shape());
    throw NonFiniteError(os.str());
  }
}

}  // namespace sim
