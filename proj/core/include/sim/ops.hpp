#pragma once

#include <map>
#include <string>
#include <vector>

#include "sim/tape.hpp"
#include "sim/tensor.hpp"

namespace sim {

// Numpy-style right-aligned broadcast; errors on incompatible shapes.
Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// rank 2x2, 3x3 (equal batch), or 3x2 (shared right operand)
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& x, int axis_a, int axis_b);
Tensor reshape(const Tensor& x, Shape new_shape);  // one dim may be -1
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t end);

// x (B,S,C) with per-batch row indices (B*V values, all in [0,S)) -> (B,V,C)
Tensor gather_tokens(const Tensor& x, const std::vector<int64_t>& indices);
// x (B,L) with shared column indices (M values in [0,L)) -> (B,M)
Tensor gather_flat(const Tensor& x, const std::vector<int64_t>& indices);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdims = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdims = false);
Tensor broadcast_to(const Tensor& x, Shape target);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor power(const Tensor& x, double exponent);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor softmax(const Tensor& x, int axis);

// Normalizes fibers along `axis`; gamma/beta are 1-D of that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis, double eps);

// Channel dimension is the last axis; statistics reduce over all others.
// In training mode the running buffers are updated in place (torch-style:
// unbiased variance, new = (1-momentum)*old + momentum*batch).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                  Tensor running_var, bool training, double momentum, double eps);

// y = x / max(||x||_2, eps) per fiber along `axis`; errors on an exactly
// zero fiber since its direction is undefined.
Tensor l2_normalize(const Tensor& x, int axis, double eps = 1e-8);

Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);

enum class OpKind {
  Add,
  Sub,
  Mul,
  Div,
  Matmul,
  Transpose,
  Reshape,
  Concat,
  Slice,
  Gather,
  GatherFlat,
  Sum,
  Mean,
  BroadcastTo,
  Exp,
  Log,
  Sqrt,
  Power,
  Gelu,
  Softmax,
  LayerNorm,
  BatchNorm,
  L2Normalize,
  Scale,
  AddScalar,
  Neg,
};

const char* op_name(OpKind kind);
const std::vector<OpKind>& op_catalog();

struct Attrs {
  std::map<std::string, double> nums;
  std::map<std::string, std::vector<int64_t>> int_lists;

  Attrs& set(const std::string& key, double v) {
    nums[key] = v;
    return *this;
  }
  Attrs& set(const std::string& key, std::vector<int64_t> v) {
    int_lists[key] = std::move(v);
    return *this;
  }
  bool has(const std::string& key) const {
    return nums.count(key) > 0 || int_lists.count(key) > 0;
  }
  double num(const std::string& key) const;
  double num_or(const std::string& key, double dflt) const;
  const std::vector<int64_t>& ints(const std::string& key) const;
};

// Uniform entry point over the catalog; named functions above are thin
// wrappers around the same kernels.
Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const Attrs& attrs = {});

}  // namespace sim
