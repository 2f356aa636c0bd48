#include "sim/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>

#include "sim/threading.hpp"

namespace sim {

namespace {

template <typename F>
void maybe_parallel(int64_t n, F&& body) {
  if (n < 4096) {
    body(int64_t{0}, n);
  } else {
    parallel_for(n, body);
  }
}

bool record_needed(const std::vector<Tensor>& inputs) {
  if (!active_tape()) return false;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

void record_op(const std::vector<Tensor>& inputs, Tensor& out, BackwardFn fn) {
  if (!record_needed(inputs)) return;
  out.node()->requires_grad = true;
  std::vector<std::shared_ptr<detail::Node>> nodes;
  nodes.reserve(inputs.size());
  for (const auto& t : inputs) nodes.push_back(t.node_ptr());
  active_tape()->record(std::move(nodes), out.node_ptr(), std::move(fn));
}

template <typename T>
std::span<T> gbuf(GradMap& grads, const Tensor& t) {
  return grads.ensure(t.node_ptr()).as<T>();
}

int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  SIM_CHECK(a >= 0 && a < rank, op << ": axis " << axis << " out of range for rank " << rank);
  return a;
}

struct AxisView {
  int64_t outer;  // product of dims before the axis
  int64_t n;      // extent of the axis
  int64_t inner;  // product of dims after the axis
};

AxisView axis_view(const Shape& s, int axis) {
  AxisView v{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  SIM_CHECK(a.dtype() == b.dtype(), op << ": mixed dtypes " << dtype_name(a.dtype()) << " and "
                                       << dtype_name(b.dtype()));
}

// Strides of `in` viewed through `out` axes, 0 where `in` broadcasts.
std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
  auto in_strides = contiguous_strides(in);
  std::vector<int64_t> st(out.size(), 0);
  size_t offset = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i) {
    st[offset + i] = in[i] == 1 ? 0 : in_strides[i];
  }
  return st;
}

struct BcastPlan {
  Shape out;
  std::vector<int64_t> sa, sb;
  bool same_shape;
};

BcastPlan make_bcast(const Shape& a, const Shape& b, const char* op) {
  BcastPlan p;
  p.same_shape = a == b;
  size_t r = std::max(a.size(), b.size());
  p.out.resize(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    SIM_CHECK(da == db || da == 1 || db == 1,
              op << ": shapes " << shape_str(a) << " and " << shape_str(b) << " do not broadcast");
    p.out[i] = std::max(da, db);
  }
  p.sa = bcast_strides(a, p.out);
  p.sb = bcast_strides(b, p.out);
  return p;
}

// Offset of logical row `r` (all axes but the last) under `strides`.
int64_t row_offset(int64_t r, const Shape& shape, const std::vector<int64_t>& strides) {
  int64_t off = 0;
  for (int ax = static_cast<int>(shape.size()) - 2; ax >= 0; --ax) {
    int64_t d = shape[static_cast<size_t>(ax)];
    off += (r % d) * strides[static_cast<size_t>(ax)];
    r /= d;
  }
  return off;
}

enum class BinKind { Add, Sub, Mul, Div };

const char* bin_name(BinKind k) {
  switch (k) {
    case BinKind::Add: return "add";
    case BinKind::Sub: return "sub";
    case BinKind::Mul: return "mul";
    case BinKind::Div: return "div";
  }
  return "?";
}

template <typename T>
T bin_eval(BinKind k, T x, T y) {
  switch (k) {
    case BinKind::Add: return x + y;
    case BinKind::Sub: return x - y;
    case BinKind::Mul: return x * y;
    case BinKind::Div: return x / y;
  }
  return T{};
}

Tensor binary_op(BinKind kind, const Tensor& a, const Tensor& b) {
  const char* name = bin_name(kind);
  require_same_dtype(a, b, name);
  BcastPlan plan = make_bcast(a.shape(), b.shape(), name);
  Tensor out = Tensor::zeros(plan.out, a.dtype());
  int64_t n = out.numel();

  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xa = a.data<T>();
    auto xb = b.data<T>();
    auto y = out.data<T>();
    if (plan.same_shape) {
      maybe_parallel(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i)
          y[static_cast<size_t>(i)] =
              bin_eval(kind, xa[static_cast<size_t>(i)], xb[static_cast<size_t>(i)]);
      });
    } else if (n > 0) {
      int64_t inner = plan.out.empty() ? 1 : plan.out.back();
      int64_t rows = n / std::max<int64_t>(inner, 1);
      int64_t ia_step = plan.sa.empty() ? 0 : plan.sa.back();
      int64_t ib_step = plan.sb.empty() ? 0 : plan.sb.back();
      maybe_parallel(rows, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
          int64_t ia = row_offset(r, plan.out, plan.sa);
          int64_t ib = row_offset(r, plan.out, plan.sb);
          T* yr = y.data() + r * inner;
          for (int64_t j = 0; j < inner; ++j)
            yr[j] = bin_eval(kind, xa[static_cast<size_t>(ia + j * ia_step)],
                             xb[static_cast<size_t>(ib + j * ib_step)]);
        }
      });
    }
  });
  check_finite(out, name);

  Tensor ta = a, tb = b;
  record_op({a, b}, out, [kind, plan, ta, tb](const Storage& og, GradMap& grads) {
    dispatch(ta.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto xa = ta.data<T>();
      auto xb = tb.data<T>();
      T* da = ta.requires_grad() ? gbuf<T>(grads, ta).data() : nullptr;
      T* db = tb.requires_grad() ? gbuf<T>(grads, tb).data() : nullptr;
      int64_t n = static_cast<int64_t>(g.size());
      if (plan.same_shape) {
        // disjoint per-element writes, safe to split
        maybe_parallel(n, [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i) {
            size_t u = static_cast<size_t>(i);
            T gv = g[u];
            switch (kind) {
              case BinKind::Add:
                if (da) da[u] += gv;
                if (db) db[u] += gv;
                break;
              case BinKind::Sub:
                if (da) da[u] += gv;
                if (db) db[u] -= gv;
                break;
              case BinKind::Mul:
                if (da) da[u] += gv * xb[u];
                if (db) db[u] += gv * xa[u];
                break;
              case BinKind::Div:
                if (da) da[u] += gv / xb[u];
                if (db) db[u] -= gv * xa[u] / (xb[u] * xb[u]);
                break;
            }
          }
        });
      } else if (n > 0) {
        // broadcast axes fold many output elements into one input slot;
        // keep this path sequential to avoid write races
        int64_t inner = plan.out.empty() ? 1 : plan.out.back();
        int64_t rows = n / std::max<int64_t>(inner, 1);
        int64_t ia_step = plan.sa.empty() ? 0 : plan.sa.back();
        int64_t ib_step = plan.sb.empty() ? 0 : plan.sb.back();
        for (int64_t r = 0; r < rows; ++r) {
          int64_t ia0 = row_offset(r, plan.out, plan.sa);
          int64_t ib0 = row_offset(r, plan.out, plan.sb);
          const T* gr = g.data() + r * inner;
          for (int64_t j = 0; j < inner; ++j) {
            size_t ia = static_cast<size_t>(ia0 + j * ia_step);
            size_t ib = static_cast<size_t>(ib0 + j * ib_step);
            T gv = gr[j];
            switch (kind) {
              case BinKind::Add:
                if (da) da[ia] += gv;
                if (db) db[ib] += gv;
                break;
              case BinKind::Sub:
                if (da) da[ia] += gv;
                if (db) db[ib] -= gv;
                break;
              case BinKind::Mul:
                if (da) da[ia] += gv * xb[ib];
                if (db) db[ib] += gv * xa[ia];
                break;
              case BinKind::Div:
                if (da) da[ia] += gv / xb[ib];
                if (db) db[ib] -= gv * xa[ia] / (xb[ib] * xb[ib]);
                break;
            }
          }
        }
      }
    });
  });
  return out;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) { return make_bcast(a, b, "broadcast").out; }

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Div, a, b); }

// ---------------------------------------------------------------- matmul

namespace {

template <typename T>
using CMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using MMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

constexpr int64_t kGemmParallelFlops = 1 << 15;

// C(M,N) (+)= A(M,K) * B(K,N)
template <typename T>
void mm_nn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool acc) {
  CMap<T> bm(b, K, N);
  auto run = [&](int64_t r0, int64_t r1) {
    int64_t m = r1 - r0;
    if (m <= 0) return;
    CMap<T> am(a + r0 * K, m, K);
    MMap<T> cm(c + r0 * N, m, N);
    if (acc) {
      cm.noalias() += am * bm;
    } else {
      cm.noalias() = am * bm;
    }
  };
  if (M * N * K >= kGemmParallelFlops && M >= 2) {
    parallel_for(M, run);
  } else {
    run(0, M);
  }
}

// C(M,N) (+)= A(M,K) * B(N,K)^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool acc) {
  CMap<T> bm(b, N, K);
  auto run = [&](int64_t r0, int64_t r1) {
    int64_t m = r1 - r0;
    if (m <= 0) return;
    CMap<T> am(a + r0 * K, m, K);
    MMap<T> cm(c + r0 * N, m, N);
    if (acc) {
      cm.noalias() += am * bm.transpose();
    } else {
      cm.noalias() = am * bm.transpose();
    }
  };
  if (M * N * K >= kGemmParallelFlops && M >= 2) {
    parallel_for(M, run);
  } else {
    run(0, M);
  }
}

// C(M,N) (+)= A(K,M)^T * B(K,N)
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool acc) {
  CMap<T> am(a, K, M);
  CMap<T> bm(b, K, N);
  auto run = [&](int64_t r0, int64_t r1) {
    int64_t m = r1 - r0;
    if (m <= 0) return;
    MMap<T> cm(c + r0 * N, m, N);
    if (acc) {
      cm.noalias() += am.middleCols(r0, m).transpose() * bm;
    } else {
      cm.noalias() = am.middleCols(r0, m).transpose() * bm;
    }
  };
  if (M * N * K >= kGemmParallelFlops && M >= 2) {
    parallel_for(M, run);
  } else {
    run(0, M);
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  int ra = a.rank(), rb = b.rank();
  SIM_CHECK((ra == 2 && rb == 2) || (ra == 3 && rb == 3) || (ra == 3 && rb == 2),
            "matmul: unsupported ranks " << ra << " and " << rb << " for shapes "
                                         << shape_str(a.shape()) << " @ " << shape_str(b.shape()));

  int64_t M = a.dim(-2), K = a.dim(-1);
  int64_t Kb = rb == 2 ? b.dim(0) : b.dim(1);
  int64_t N = b.dim(-1);
  SIM_CHECK(K == Kb, "matmul: inner dimensions differ, " << shape_str(a.shape()) << " @ "
                                                         << shape_str(b.shape()));
  int64_t B = ra == 3 ? a.dim(0) : 1;
  if (ra == 3 && rb == 3) {
    SIM_CHECK(a.dim(0) == b.dim(0), "matmul: batch sizes differ, " << shape_str(a.shape()) << " @ "
                                                                   << shape_str(b.shape()));
  }

  Shape out_shape = ra == 3 ? Shape{B, M, N} : Shape{M, N};
  Tensor out = Tensor::zeros(out_shape, a.dtype());

  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* pc = out.data<T>().data();
    if (rb == 2) {
      // rank-3 lhs with shared rhs flattens to one row-major product
      mm_nn(pa, pb, pc, B * M, K, N, false);
    } else if (ra == 2) {
      mm_nn(pa, pb, pc, M, K, N, false);
    } else {
      parallel_for(B, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i)
          mm_nn(pa + i * M * K, pb + i * K * N, pc + i * M * N, M, K, N, false);
      });
    }
  });
  check_finite(out, "matmul");

  Tensor ta = a, tb = b;
  record_op({a, b}, out, [ta, tb, B, M, K, N, ra, rb](const Storage& og, GradMap& grads) {
    dispatch(ta.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      const T* pa = ta.data<T>().data();
      const T* pb = tb.data<T>().data();
      T* da = ta.requires_grad() ? gbuf<T>(grads, ta).data() : nullptr;
      T* db = tb.requires_grad() ? gbuf<T>(grads, tb).data() : nullptr;
      if (rb == 2) {
        int64_t rows = (ra == 3 ? B : 1) * M;
        if (da) mm_nt(g.data(), pb, da, rows, N, K, true);
        if (db) mm_tn(pa, g.data(), db, K, rows, N, true);
      } else {
        auto one = [&](int64_t i) {
          const T* gi = g.data() + i * M * N;
          if (da) mm_nt(gi, pb + i * K * N, da + i * M * K, M, N, K, true);
          if (db) mm_tn(pa + i * M * K, gi, db + i * K * N, K, M, N, true);
        };
        parallel_for(B, [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i) one(i);
        });
      }
    });
  });
  return out;
}

// ------------------------------------------------- layout ops

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
  int r = x.rank();
  int a = normalize_axis(axis_a, r, "transpose");
  int b = normalize_axis(axis_b, r, "transpose");
  Shape out_shape = x.shape();
  std::swap(out_shape[static_cast<size_t>(a)], out_shape[static_cast<size_t>(b)]);
  Tensor out = Tensor::zeros(out_shape, x.dtype());

  auto src_strides = contiguous_strides(x.shape());
  std::vector<int64_t> strides = src_strides;  // per out axis
  std::swap(strides[static_cast<size_t>(a)], strides[static_cast<size_t>(b)]);

  int64_t n = x.numel();
  int64_t inner = out_shape.empty() ? 1 : out_shape.back();
  int64_t rows = inner > 0 ? n / inner : 0;
  int64_t istep = strides.empty() ? 0 : strides.back();

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = out.data<T>();
    maybe_parallel(rows, [&](int64_t lo, int64_t hi) {
      for (int64_t rr = lo; rr < hi; ++rr) {
        int64_t off = row_offset(rr, out_shape, strides);
        T* d = dst.data() + rr * inner;
        for (int64_t j = 0; j < inner; ++j) d[j] = src[static_cast<size_t>(off + j * istep)];
      }
    });
  });
  check_finite(out, "transpose");

  Tensor tx = x;
  Shape x_shape = x.shape();
  record_op({x}, out, [tx, x_shape, a, b](const Storage& og, GradMap& grads) {
    // walk dx linearly, reading g at the swapped position
    auto g_strides = contiguous_strides([&] {
      Shape s = x_shape;
      std::swap(s[static_cast<size_t>(a)], s[static_cast<size_t>(b)]);
      return s;
    }());
    std::vector<int64_t> strides = g_strides;
    std::swap(strides[static_cast<size_t>(a)], strides[static_cast<size_t>(b)]);
    int64_t inner = x_shape.empty() ? 1 : x_shape.back();
    int64_t rows = inner > 0 ? static_cast<int64_t>(og.size()) / inner : 0;
    int64_t istep = strides.empty() ? 0 : strides.back();
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto dx = gbuf<T>(grads, tx);
      maybe_parallel(rows, [&](int64_t lo, int64_t hi) {
        for (int64_t rr = lo; rr < hi; ++rr) {
          int64_t off = row_offset(rr, x_shape, strides);
          T* d = dx.data() + rr * inner;
          for (int64_t j = 0; j < inner; ++j) d[j] += g[static_cast<size_t>(off + j * istep)];
        }
      });
    });
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      SIM_CHECK(infer < 0, "reshape: more than one -1 in " << shape_str(new_shape));
      infer = static_cast<int>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    SIM_CHECK(known > 0 && x.numel() % known == 0,
              "reshape: cannot infer dimension for " << x.numel() << " elements into "
                                                     << shape_str(new_shape));
    new_shape[static_cast<size_t>(infer)] = x.numel() / known;
  }
  SIM_CHECK(shape_numel(new_shape) == x.numel(),
            "reshape: " << shape_str(x.shape()) << " to " << shape_str(new_shape)
                        << " changes element count");

  Tensor out = Tensor::zeros(new_shape, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = out.data<T>();
    std::copy(src.begin(), src.end(), dst.begin());
  });

  Tensor tx = x;
  record_op({x}, out, [tx](const Storage& og, GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto dx = gbuf<T>(grads, tx);
      maybe_parallel(static_cast<int64_t>(g.size()), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) dx[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
      });
    });
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  SIM_CHECK(!parts.empty(), "concat: no inputs");
  int r = parts[0].rank();
  int ax = normalize_axis(axis, r, "concat");
  DType dt = parts[0].dtype();
  Shape out_shape = parts[0].shape();
  int64_t total_axis = 0;
  for (const auto& p : parts) {
    SIM_CHECK(p.rank() == r, "concat: mixed ranks");
    SIM_CHECK(p.dtype() == dt, "concat: mixed dtypes");
    for (int i = 0; i < r; ++i) {
      if (i == ax) continue;
      SIM_CHECK(p.dim(i) == out_shape[static_cast<size_t>(i)],
                "concat: shape " << shape_str(p.shape()) << " differs from "
                                 << shape_str(parts[0].shape()) << " off axis " << ax);
    }
    total_axis += p.dim(ax);
  }
  out_shape[static_cast<size_t>(ax)] = total_axis;
  Tensor out = Tensor::zeros(out_shape, dt);

  AxisView v = axis_view(out_shape, ax);
  int64_t out_block = v.n * v.inner;

  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto dst = out.data<T>();
    int64_t offset = 0;
    for (const auto& p : parts) {
      auto src = p.data<T>();
      int64_t block = p.dim(ax) * v.inner;
      maybe_parallel(v.outer, [&](int64_t lo, int64_t hi) {
        for (int64_t o = lo; o < hi; ++o)
          std::memcpy(dst.data() + o * out_block + offset, src.data() + o * block,
                      static_cast<size_t>(block) * sizeof(T));
      });
      offset += block;
    }
  });
  check_finite(out, "concat");

  std::vector<Tensor> held = parts;
  record_op(parts, out, [held, v, out_block, ax](const Storage& og, GradMap& grads) {
    dispatch(held[0].dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      int64_t offset = 0;
      for (const auto& p : held) {
        int64_t block = p.dim(ax) * v.inner;
        if (p.requires_grad()) {
          auto dp = gbuf<T>(grads, p);
          maybe_parallel(v.outer, [&](int64_t lo, int64_t hi) {
            for (int64_t o = lo; o < hi; ++o) {
              const T* src = g.data() + o * out_block + offset;
              T* dst = dp.data() + o * block;
              for (int64_t j = 0; j < block; ++j) dst[j] += src[j];
            }
          });
        }
        offset += block;
      }
    });
  });
  return out;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t end) {
  int ax = normalize_axis(axis, x.rank(), "slice");
  int64_t d = x.dim(ax);
  SIM_CHECK(start >= 0 && start < end && end <= d,
            "slice: range [" << start << "," << end << ") invalid for axis " << ax << " of "
                             << shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(ax)] = end - start;
  Tensor out = Tensor::zeros(out_shape, x.dtype());

  AxisView v = axis_view(x.shape(), ax);
  int64_t len = end - start;
  int64_t src_block = v.n * v.inner;
  int64_t dst_block = len * v.inner;

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = out.data<T>();
    maybe_parallel(v.outer, [&](int64_t lo, int64_t hi) {
      for (int64_t o = lo; o < hi; ++o)
        std::memcpy(dst.data() + o * dst_block, src.data() + o * src_block + start * v.inner,
                    static_cast<size_t>(dst_block) * sizeof(T));
    });
  });

  Tensor tx = x;
  record_op({x}, out, [tx, v, start, len, src_block, dst_block](const Storage& og, GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto dx = gbuf<T>(grads, tx);
      maybe_parallel(v.outer, [&](int64_t lo, int64_t hi) {
        for (int64_t o = lo; o < hi; ++o) {
          const T* src = g.data() + o * dst_block;
          T* dst = dx.data() + o * src_block + start * v.inner;
          for (int64_t j = 0; j < dst_block; ++j) dst[j] += src[j];
        }
      });
    });
  });
  return out;
}

Tensor gather_tokens(const Tensor& x, const std::vector<int64_t>& indices) {
  SIM_CHECK(x.rank() == 3, "gather_tokens: input must be rank 3, got " << shape_str(x.shape()));
  int64_t B = x.dim(0), S = x.dim(1), C = x.dim(2);
  SIM_CHECK(!indices.empty() && static_cast<int64_t>(indices.size()) % B == 0,
            "gather_tokens: " << indices.size() << " indices not divisible by batch " << B);
  int64_t V = static_cast<int64_t>(indices.size()) / B;
  for (int64_t i = 0; i < static_cast<int64_t>(indices.size()); ++i) {
    SIM_CHECK(indices[static_cast<size_t>(i)] >= 0 && indices[static_cast<size_t>(i)] < S,
              "gather_tokens: index " << indices[static_cast<size_t>(i)] << " out of range [0,"
                                      << S << ")");
  }
  Tensor out = Tensor::zeros({B, V, C}, x.dtype());

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = out.data<T>();
    maybe_parallel(B * V, [&](int64_t lo, int64_t hi) {
      for (int64_t t = lo; t < hi; ++t) {
        int64_t b = t / V;
        int64_t row = indices[static_cast<size_t>(t)];
        std::memcpy(dst.data() + t * C, src.data() + (b * S + row) * C,
                    static_cast<size_t>(C) * sizeof(T));
      }
    });
  });

  Tensor tx = x;
  auto idx = indices;
  record_op({x}, out, [tx, idx, B, S, V, C](const Storage& og, GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto dx = gbuf<T>(grads, tx);
      // batches are disjoint; duplicates within one batch stay sequential
      parallel_for(B, [&](int64_t lo, int64_t hi) {
        for (int64_t b = lo; b < hi; ++b) {
          for (int64_t i = 0; i < V; ++i) {
            int64_t row = idx[static_cast<size_t>(b * V + i)];
            const T* src = g.data() + (b * V + i) * C;
            T* dst = dx.data() + (b * S + row) * C;
            for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
          }
        }
      });
    });
  });
  return out;
}

Tensor gather_flat(const Tensor& x, const std::vector<int64_t>& indices) {
  SIM_CHECK(x.rank() == 2, "gather_flat: input must be rank 2, got " << shape_str(x.shape()));
  int64_t B = x.dim(0), L = x.dim(1);
  int64_t M = static_cast<int64_t>(indices.size());
  SIM_CHECK(M > 0, "gather_flat: empty index list");
  for (int64_t m = 0; m < M; ++m) {
    SIM_CHECK(indices[static_cast<size_t>(m)] >= 0 && indices[static_cast<size_t>(m)] < L,
              "gather_flat: index " << indices[static_cast<size_t>(m)] << " out of range [0," << L
                                    << ")");
  }
  Tensor out = Tensor::zeros({B, M}, x.dtype());

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = out.data<T>();
    maybe_parallel(B, [&](int64_t lo, int64_t hi) {
      for (int64_t b = lo; b < hi; ++b) {
        const T* xr = src.data() + b * L;
        T* yr = dst.data() + b * M;
        for (int64_t m = 0; m < M; ++m) yr[m] = xr[indices[static_cast<size_t>(m)]];
      }
    });
  });

  Tensor tx = x;
  auto idx = indices;
  record_op({x}, out, [tx, idx, B, L, M](const Storage& og, GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto dx = gbuf<T>(grads, tx);
      parallel_for(B, [&](int64_t lo, int64_t hi) {
        for (int64_t b = lo; b < hi; ++b) {
          const T* gr = g.data() + b * M;
          T* xr = dx.data() + b * L;
          for (int64_t m = 0; m < M; ++m) xr[idx[static_cast<size_t>(m)]] += gr[m];
        }
      });
    });
  });
  return out;
}

// ------------------------------------------------- reductions

namespace {

Tensor reduce_full(const Tensor& x, bool take_mean) {
  const char* name = take_mean ? "mean" : "sum";
  int64_t n = x.numel();
  SIM_CHECK(n > 0, name << ": empty tensor");
  double acc = 0.0;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(src[static_cast<size_t>(i)]);
  });
  if (take_mean) acc /= static_cast<double>(n);
  Tensor out = Tensor::scalar(acc, x.dtype());
  check_finite(out, name);

  Tensor tx = x;
  record_op({x}, out, [tx, n, take_mean](const Storage& og, GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      T gv = og.as<T>()[0];
      if (take_mean) gv /= static_cast<T>(n);
      auto dx = gbuf<T>(grads, tx);
      maybe_parallel(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) dx[static_cast<size_t>(i)] += gv;
      });
    });
  });
  return out;
}

Tensor reduce_axis(const Tensor& x, int axis, bool keepdims, bool take_mean) {
  const char* name = take_mean ? "mean" : "sum";
  int ax = normalize_axis(axis, x.rank(), name);
  AxisView v = axis_view(x.shape(), ax);
  SIM_CHECK(v.n > 0, name << ": axis " << ax << " is empty in " << shape_str(x.shape()));

  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i == ax) {
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.dim(i));
    }
  }
  Tensor out = Tensor::zeros(out_shape, x.dtype());

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = out.data<T>();
    T inv = take_mean ? static_cast<T>(1.0 / static_cast<double>(v.n)) : T{1};
    maybe_parallel(v.outer, [&](int64_t lo, int64_t hi) {
      for (int64_t o = lo; o < hi; ++o) {
        T* yr = dst.data() + o * v.inner;
        const T* base = src.data() + o * v.n * v.inner;
        for (int64_t k = 0; k < v.n; ++k) {
          const T* xr = base + k * v.inner;
          for (int64_t i = 0; i < v.inner; ++i) yr[i] += xr[i];
        }
        if (take_mean) {
          for (int64_t i = 0; i < v.inner; ++i) yr[i] *= inv;
        }
      }
    });
  });
  check_finite(out, name);

  Tensor tx = x;
  record_op({x}, out, [tx, v, take_mean](const Storage& og, GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto dx = gbuf<T>(grads, tx);
      T inv = take_mean ? static_cast<T>(1.0 / static_cast<double>(v.n)) : T{1};
      maybe_parallel(v.outer, [&](int64_t lo, int64_t hi) {
        for (int64_t o = lo; o < hi; ++o) {
          const T* gr = g.data() + o * v.inner;
          T* base = dx.data() + o * v.n * v.inner;
          for (int64_t k = 0; k < v.n; ++k) {
            T* xr = base + k * v.inner;
            for (int64_t i = 0; i < v.inner; ++i) xr[i] += gr[i] * inv;
          }
        }
      });
    });
  });
  return out;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_full(x, false); }
Tensor sum(const Tensor& x, int axis, bool keepdims) { return reduce_axis(x, axis, keepdims, false); }
Tensor mean(const Tensor& x) { return reduce_full(x, true); }
Tensor mean(const Tensor& x, int axis, bool keepdims) { return reduce_axis(x, axis, keepdims, true); }

Tensor broadcast_to(const Tensor& x, Shape target) {
  const Shape& xs = x.shape();
  SIM_CHECK(xs.size() <= target.size(), "broadcast_to: rank " << xs.size() << " exceeds target "
                                                              << shape_str(target));
  size_t offset = target.size() - xs.size();
  for (size_t i = 0; i < xs.size(); ++i) {
    SIM_CHECK(xs[i] == target[offset + i] || xs[i] == 1,
              "broadcast_to: " << shape_str(xs) << " to " << shape_str(target));
  }
  auto strides = bcast_strides(xs, target);
  Tensor out = Tensor::zeros(target, x.dtype());
  int64_t n = out.numel();
  int64_t inner = target.empty() ? 1 : target.back();
  int64_t rows = inner > 0 ? n / inner : 0;
  int64_t istep = strides.empty() ? 0 : strides.back();

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = out.data<T>();
    maybe_parallel(rows, [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        int64_t off = row_offset(r, target, strides);
        T* d = dst.data() + r * inner;
        for (int64_t j = 0; j < inner; ++j) d[j] = src[static_cast<size_t>(off + j * istep)];
      }
    });
  });

  Tensor tx = x;
  Shape tgt = target;
  record_op({x}, out, [tx, tgt, strides](const Storage& og, GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto dx = gbuf<T>(grads, tx);
      int64_t inner = tgt.empty() ? 1 : tgt.back();
      int64_t rows = inner > 0 ? static_cast<int64_t>(g.size()) / inner : 0;
      int64_t istep = strides.empty() ? 0 : strides.back();
      for (int64_t r = 0; r < rows; ++r) {  // folded writes, keep sequential
        int64_t off = row_offset(r, tgt, strides);
        const T* gr = g.data() + r * inner;
        for (int64_t j = 0; j < inner; ++j) dx[static_cast<size_t>(off + j * istep)] += gr[j];
      }
    });
  });
  return out;
}

// ------------------------------------------------- pointwise nonlinear

namespace {

template <typename FwdT, typename BwdT>
Tensor unary_op(const char* name, const Tensor& x, FwdT fwd, BwdT bwd) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  int64_t n = x.numel();
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = out.data<T>();
    maybe_parallel(n, [&](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; ++i)
        dst[static_cast<size_t>(i)] =
            static_cast<T>(fwd(static_cast<double>(src[static_cast<size_t>(i)])));
    });
  });
  check_finite(out, name);

  Tensor tx = x, to = out;
  record_op({x}, out, [tx, to, bwd, n](const Storage& og, GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto xs = tx.data<T>();
      auto ys = to.data<T>();
      auto dx = gbuf<T>(grads, tx);
      maybe_parallel(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
          size_t u = static_cast<size_t>(i);
          dx[u] += static_cast<T>(static_cast<double>(g[u]) *
                                  bwd(static_cast<double>(xs[u]), static_cast<double>(ys[u])));
        }
      });
    });
  });
  return out;
}

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_bwd(double x) {
  double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

}  // namespace

Tensor exp(const Tensor& x) {
  return unary_op("exp", x, [](double v) { return std::exp(v); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op("log", x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op("sqrt", x, [](double v) { return std::sqrt(v); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor power(const Tensor& x, double exponent) {
  return unary_op("power", x, [exponent](double v) { return std::pow(v, exponent); },
                  [exponent](double v, double) {
                    return exponent == 0.0 ? 0.0 : exponent * std::pow(v, exponent - 1.0);
                  });
}

Tensor gelu(const Tensor& x) {
  return unary_op("gelu", x, [](double v) { return gelu_fwd(v); },
                  [](double v, double) { return gelu_bwd(v); });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op("scale", x, [c](double v) { return c * v; },
                  [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op("add_scalar", x, [c](double v) { return v + c; },
                  [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) {
  return unary_op("neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

// ------------------------------------------------- fiber ops

Tensor softmax(const Tensor& x, int axis) {
  int ax = normalize_axis(axis, x.rank(), "softmax");
  AxisView v = axis_view(x.shape(), ax);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  int64_t rows = v.outer * v.inner;

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = out.data<T>();
    maybe_parallel(rows, [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        int64_t o = r / v.inner, i = r % v.inner;
        int64_t base = o * v.n * v.inner + i;
        T m = src[static_cast<size_t>(base)];
        for (int64_t k = 1; k < v.n; ++k)
          m = std::max(m, src[static_cast<size_t>(base + k * v.inner)]);
        T z{0};
        for (int64_t k = 0; k < v.n; ++k) {
          T e = std::exp(src[static_cast<size_t>(base + k * v.inner)] - m);
          dst[static_cast<size_t>(base + k * v.inner)] = e;
          z += e;
        }
        T inv = T{1} / z;
        for (int64_t k = 0; k < v.n; ++k) dst[static_cast<size_t>(base + k * v.inner)] *= inv;
      }
    });
  });
  check_finite(out, "softmax");

  Tensor tx = x, to = out;
  record_op({x}, out, [tx, to, v](const Storage& og, GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto y = to.data<T>();
      auto dx = gbuf<T>(grads, tx);
      int64_t rows = v.outer * v.inner;
      maybe_parallel(rows, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
          int64_t o = r / v.inner, i = r % v.inner;
          int64_t base = o * v.n * v.inner + i;
          T dot{0};
          for (int64_t k = 0; k < v.n; ++k) {
            size_t u = static_cast<size_t>(base + k * v.inner);
            dot += g[u] * y[u];
          }
          for (int64_t k = 0; k < v.n; ++k) {
            size_t u = static_cast<size_t>(base + k * v.inner);
            dx[u] += y[u] * (g[u] - dot);
          }
        }
      });
    });
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis, double eps) {
  require_same_dtype(x, gamma, "layer_norm");
  require_same_dtype(x, beta, "layer_norm");
  int ax = normalize_axis(axis, x.rank(), "layer_norm");
  AxisView v = axis_view(x.shape(), ax);
  SIM_CHECK(gamma.rank() == 1 && gamma.dim(0) == v.n,
            "layer_norm: gamma shape " << shape_str(gamma.shape()) << " does not match axis extent "
                                       << v.n);
  SIM_CHECK(beta.rank() == 1 && beta.dim(0) == v.n,
            "layer_norm: beta shape " << shape_str(beta.shape()) << " does not match axis extent "
                                      << v.n);

  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  int64_t rows = v.outer * v.inner;
  auto mu_buf = std::make_shared<Storage>(x.dtype(), rows);
  auto istd_buf = std::make_shared<Storage>(x.dtype(), rows);

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto gam = gamma.data<T>();
    auto bet = beta.data<T>();
    auto dst = out.data<T>();
    auto mu = mu_buf->as<T>();
    auto istd = istd_buf->as<T>();
    maybe_parallel(rows, [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        int64_t o = r / v.inner, i = r % v.inner;
        int64_t base = o * v.n * v.inner + i;
        double m = 0.0;
        for (int64_t k = 0; k < v.n; ++k) m += src[static_cast<size_t>(base + k * v.inner)];
        m /= static_cast<double>(v.n);
        double var = 0.0;
        for (int64_t k = 0; k < v.n; ++k) {
          double d = static_cast<double>(src[static_cast<size_t>(base + k * v.inner)]) - m;
          var += d * d;
        }
        var /= static_cast<double>(v.n);
        double is = 1.0 / std::sqrt(var + eps);
        mu[static_cast<size_t>(r)] = static_cast<T>(m);
        istd[static_cast<size_t>(r)] = static_cast<T>(is);
        for (int64_t k = 0; k < v.n; ++k) {
          size_t u = static_cast<size_t>(base + k * v.inner);
          double xh = (static_cast<double>(src[u]) - m) * is;
          dst[u] = static_cast<T>(xh * static_cast<double>(gam[static_cast<size_t>(k)]) +
                                  static_cast<double>(bet[static_cast<size_t>(k)]));
        }
      }
    });
  });
  check_finite(out, "layer_norm");

  Tensor tx = x, tg = gamma, tb = beta;
  record_op({x, gamma, beta}, out, [tx, tg, tb, v, mu_buf, istd_buf](const Storage& og,
                                                                     GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto xs = tx.data<T>();
      auto gam = tg.data<T>();
      auto mu = std::as_const(*mu_buf).as<T>();
      auto istd = std::as_const(*istd_buf).as<T>();
      int64_t rows = v.outer * v.inner;
      if (tx.requires_grad()) {
        auto dx = gbuf<T>(grads, tx);
        maybe_parallel(rows, [&](int64_t lo, int64_t hi) {
          for (int64_t r = lo; r < hi; ++r) {
            int64_t o = r / v.inner, i = r % v.inner;
            int64_t base = o * v.n * v.inner + i;
            double m = mu[static_cast<size_t>(r)], is = istd[static_cast<size_t>(r)];
            double mean_g = 0.0, mean_gx = 0.0;
            for (int64_t k = 0; k < v.n; ++k) {
              size_t u = static_cast<size_t>(base + k * v.inner);
              double gh = static_cast<double>(g[u]) * gam[static_cast<size_t>(k)];
              double xh = (static_cast<double>(xs[u]) - m) * is;
              mean_g += gh;
              mean_gx += gh * xh;
            }
            mean_g /= static_cast<double>(v.n);
            mean_gx /= static_cast<double>(v.n);
            for (int64_t k = 0; k < v.n; ++k) {
              size_t u = static_cast<size_t>(base + k * v.inner);
              double gh = static_cast<double>(g[u]) * gam[static_cast<size_t>(k)];
              double xh = (static_cast<double>(xs[u]) - m) * is;
              dx[u] += static_cast<T>(is * (gh - mean_g - xh * mean_gx));
            }
          }
        });
      }
      if (tg.requires_grad() || tb.requires_grad()) {
        T* dgam = tg.requires_grad() ? gbuf<T>(grads, tg).data() : nullptr;
        T* dbet = tb.requires_grad() ? gbuf<T>(grads, tb).data() : nullptr;
        for (int64_t r = 0; r < rows; ++r) {  // shared accumulators, sequential
          int64_t o = r / v.inner, i = r % v.inner;
          int64_t base = o * v.n * v.inner + i;
          double m = mu[static_cast<size_t>(r)], is = istd[static_cast<size_t>(r)];
          for (int64_t k = 0; k < v.n; ++k) {
            size_t u = static_cast<size_t>(base + k * v.inner);
            double xh = (static_cast<double>(xs[u]) - m) * is;
            if (dgam) dgam[k] += static_cast<T>(static_cast<double>(g[u]) * xh);
            if (dbet) dbet[k] += g[u];
          }
        }
      }
    });
  });
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                  Tensor running_var, bool training, double momentum, double eps) {
  require_same_dtype(x, gamma, "batch_norm");
  require_same_dtype(x, beta, "batch_norm");
  SIM_CHECK(x.rank() >= 2, "batch_norm: input rank must be >= 2, got " << shape_str(x.shape()));
  int64_t C = x.dim(-1);
  int64_t R = x.numel() / C;
  auto check_param = [&](const Tensor& p, const char* which) {
    SIM_CHECK(p.rank() == 1 && p.dim(0) == C, "batch_norm: " << which << " shape "
                                                             << shape_str(p.shape())
                                                             << " does not match channels " << C);
  };
  check_param(gamma, "gamma");
  check_param(beta, "beta");
  check_param(running_mean, "running_mean");
  check_param(running_var, "running_var");
  if (training) {
    SIM_CHECK(R >= 2, "batch_norm: training mode needs at least 2 rows per channel, got " << R);
  }

  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  auto mu_buf = std::make_shared<Storage>(x.dtype(), C);
  auto istd_buf = std::make_shared<Storage>(x.dtype(), C);

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto gam = gamma.data<T>();
    auto bet = beta.data<T>();
    auto dst = out.data<T>();
    auto mu = mu_buf->as<T>();
    auto istd = istd_buf->as<T>();

    std::vector<double> m(static_cast<size_t>(C), 0.0), var(static_cast<size_t>(C), 0.0);
    if (training) {
      for (int64_t r = 0; r < R; ++r) {
        const T* row = src.data() + r * C;
        for (int64_t c = 0; c < C; ++c) m[static_cast<size_t>(c)] += row[c];
      }
      for (int64_t c = 0; c < C; ++c) m[static_cast<size_t>(c)] /= static_cast<double>(R);
      for (int64_t r = 0; r < R; ++r) {
        const T* row = src.data() + r * C;
        for (int64_t c = 0; c < C; ++c) {
          double d = static_cast<double>(row[c]) - m[static_cast<size_t>(c)];
          var[static_cast<size_t>(c)] += d * d;
        }
      }
      for (int64_t c = 0; c < C; ++c) var[static_cast<size_t>(c)] /= static_cast<double>(R);
      // torch-style running update: biased batch var is used for
      // normalization, the unbiased one feeds the running buffer
      for (int64_t c = 0; c < C; ++c) {
        size_t u = static_cast<size_t>(c);
        double unbiased = var[u] * static_cast<double>(R) / static_cast<double>(R - 1);
        running_mean.node()->data->write(c, (1.0 - momentum) * running_mean.value_at(c) +
                                                momentum * m[u]);
        running_var.node()->data->write(c, (1.0 - momentum) * running_var.value_at(c) +
                                               momentum * unbiased);
      }
    } else {
      for (int64_t c = 0; c < C; ++c) {
        m[static_cast<size_t>(c)] = running_mean.value_at(c);
        var[static_cast<size_t>(c)] = running_var.value_at(c);
      }
    }
    for (int64_t c = 0; c < C; ++c) {
      size_t u = static_cast<size_t>(c);
      mu[u] = static_cast<T>(m[u]);
      istd[u] = static_cast<T>(1.0 / std::sqrt(var[u] + eps));
    }
    maybe_parallel(R, [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        const T* row = src.data() + r * C;
        T* yr = dst.data() + r * C;
        for (int64_t c = 0; c < C; ++c) {
          size_t u = static_cast<size_t>(c);
          T xh = (row[c] - mu[u]) * istd[u];
          yr[c] = xh * gam[u] + bet[u];
        }
      }
    });
  });
  check_finite(out, "batch_norm");

  Tensor tx = x, tg = gamma, tb = beta;
  record_op({x, gamma, beta}, out,
            [tx, tg, tb, mu_buf, istd_buf, training, C, R](const Storage& og, GradMap& grads) {
              dispatch(tx.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = og.as<T>();
                auto xs = tx.data<T>();
                auto gam = tg.data<T>();
                auto mu = std::as_const(*mu_buf).as<T>();
                auto istd = std::as_const(*istd_buf).as<T>();

                std::vector<double> sum_g(static_cast<size_t>(C), 0.0);
                std::vector<double> sum_gx(static_cast<size_t>(C), 0.0);
                for (int64_t r = 0; r < R; ++r) {
                  const T* gr = g.data() + r * C;
                  const T* xr = xs.data() + r * C;
                  for (int64_t c = 0; c < C; ++c) {
                    size_t u = static_cast<size_t>(c);
                    double xh = (static_cast<double>(xr[c]) - mu[u]) * istd[u];
                    sum_g[u] += gr[c];
                    sum_gx[u] += static_cast<double>(gr[c]) * xh;
                  }
                }
                if (tg.requires_grad()) {
                  auto dgam = gbuf<T>(grads, tg);
                  for (int64_t c = 0; c < C; ++c)
                    dgam[static_cast<size_t>(c)] += static_cast<T>(sum_gx[static_cast<size_t>(c)]);
                }
                if (tb.requires_grad()) {
                  auto dbet = gbuf<T>(grads, tb);
                  for (int64_t c = 0; c < C; ++c)
                    dbet[static_cast<size_t>(c)] += static_cast<T>(sum_g[static_cast<size_t>(c)]);
                }
                if (tx.requires_grad()) {
                  auto dx = gbuf<T>(grads, tx);
                  maybe_parallel(R, [&](int64_t lo, int64_t hi) {
                    for (int64_t r = lo; r < hi; ++r) {
                      const T* gr = g.data() + r * C;
                      const T* xr = xs.data() + r * C;
                      T* dr = dx.data() + r * C;
                      for (int64_t c = 0; c < C; ++c) {
                        size_t u = static_cast<size_t>(c);
                        double gs = static_cast<double>(gam[u]) * istd[u];
                        if (training) {
                          double xh = (static_cast<double>(xr[c]) - mu[u]) * istd[u];
                          dr[c] += static_cast<T>(
                              gs * (static_cast<double>(gr[c]) - sum_g[u] / R - xh * sum_gx[u] / R));
                        } else {
                          dr[c] += static_cast<T>(gs * static_cast<double>(gr[c]));
                        }
                      }
                    }
                  });
                }
              });
            });
  return out;
}

Tensor l2_normalize(const Tensor& x, int axis, double eps) {
  SIM_CHECK(eps > 0.0, "l2_normalize: eps must be positive, got " << eps);
  int ax = normalize_axis(axis, x.rank(), "l2_normalize");
  AxisView v = axis_view(x.shape(), ax);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  int64_t rows = v.outer * v.inner;
  auto denom_buf = std::make_shared<Storage>(DType::F64, rows);

  int64_t zero_row = -1;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = out.data<T>();
    auto denom = denom_buf->as<double>();
    std::atomic<int64_t> zero{-1};
    maybe_parallel(rows, [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        int64_t o = r / v.inner, i = r % v.inner;
        int64_t base = o * v.n * v.inner + i;
        double s = 0.0;
        for (int64_t k = 0; k < v.n; ++k) {
          double xv = src[static_cast<size_t>(base + k * v.inner)];
          s += xv * xv;
        }
        double nrm = std::sqrt(s);
        if (nrm == 0.0) {
          zero.store(r, std::memory_order_relaxed);
          return;
        }
        double d = std::max(nrm, eps);
        denom[static_cast<size_t>(r)] = d;
        for (int64_t k = 0; k < v.n; ++k) {
          size_t u = static_cast<size_t>(base + k * v.inner);
          dst[u] = static_cast<T>(static_cast<double>(src[u]) / d);
        }
      }
    });
    zero_row = zero.load();
  });
  SIM_CHECK(zero_row < 0, "l2_normalize: fiber " << zero_row << " along axis " << ax
                                                 << " has exactly zero norm");
  check_finite(out, "l2_normalize");

  Tensor tx = x;
  record_op({x}, out, [tx, v, eps, denom_buf](const Storage& og, GradMap& grads) {
    dispatch(tx.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = og.as<T>();
      auto xs = tx.data<T>();
      auto denom = std::as_const(*denom_buf).as<double>();
      auto dx = gbuf<T>(grads, tx);
      int64_t rows = v.outer * v.inner;
      maybe_parallel(rows, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
          int64_t o = r / v.inner, i = r % v.inner;
          int64_t base = o * v.n * v.inner + i;
          double d = denom[static_cast<size_t>(r)];
          // denom stores max(norm, eps); recompute the norm to pick a branch
          double s = 0.0;
          for (int64_t k = 0; k < v.n; ++k) {
            double xv = xs[static_cast<size_t>(base + k * v.inner)];
            s += xv * xv;
          }
          bool clamped = std::sqrt(s) < eps;
          if (clamped) {
            for (int64_t k = 0; k < v.n; ++k) {
              size_t u = static_cast<size_t>(base + k * v.inner);
              dx[u] += static_cast<T>(static_cast<double>(g[u]) / d);
            }
          } else {
            double ydotg = 0.0;
            for (int64_t k = 0; k < v.n; ++k) {
              size_t u = static_cast<size_t>(base + k * v.inner);
              ydotg += (static_cast<double>(xs[u]) / d) * static_cast<double>(g[u]);
            }
            for (int64_t k = 0; k < v.n; ++k) {
              size_t u = static_cast<size_t>(base + k * v.inner);
              double y = static_cast<double>(xs[u]) / d;
              dx[u] += static_cast<T>((static_cast<double>(g[u]) - y * ydotg) / d);
            }
          }
        }
      });
    });
  });
  return out;
}

// ------------------------------------------------- catalog plumbing

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Matmul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Gather: return "gather";
    case OpKind::GatherFlat: return "gather_flat";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::BroadcastTo: return "broadcast_to";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Power: return "power";
    case OpKind::Gelu: return "gelu";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Neg: return "neg";
  }
  return "?";
}

const std::vector<OpKind>& op_catalog() {
  static const std::vector<OpKind> kCatalog = {
      OpKind::Add,      OpKind::Sub,        OpKind::Mul,       OpKind::Div,
      OpKind::Matmul,   OpKind::Transpose,  OpKind::Reshape,   OpKind::Concat,
      OpKind::Slice,    OpKind::Gather,     OpKind::GatherFlat, OpKind::Sum,
      OpKind::Mean,     OpKind::BroadcastTo, OpKind::Exp,      OpKind::Log,
      OpKind::Sqrt,     OpKind::Power,      OpKind::Gelu,      OpKind::Softmax,
      OpKind::LayerNorm, OpKind::BatchNorm, OpKind::L2Normalize, OpKind::Scale,
      OpKind::AddScalar, OpKind::Neg,
  };
  return kCatalog;
}

double Attrs::num(const std::string& key) const {
  auto it = nums.find(key);
  SIM_CHECK(it != nums.end(), "missing op attribute '" << key << "'");
  return it->second;
}

double Attrs::num_or(const std::string& key, double dflt) const {
  auto it = nums.find(key);
  return it == nums.end() ? dflt : it->second;
}

const std::vector<int64_t>& Attrs::ints(const std::string& key) const {
  auto it = int_lists.find(key);
  SIM_CHECK(it != int_lists.end(), "missing op attribute '" << key << "'");
  return it->second;
}

Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const Attrs& attrs) {
  auto arity = [&](size_t n) {
    SIM_CHECK(inputs.size() == n,
              op_name(kind) << ": expected " << n << " inputs, got " << inputs.size());
  };
  switch (kind) {
    case OpKind::Add: arity(2); return add(inputs[0], inputs[1]);
    case OpKind::Sub: arity(2); return sub(inputs[0], inputs[1]);
    case OpKind::Mul: arity(2); return mul(inputs[0], inputs[1]);
    case OpKind::Div: arity(2); return div(inputs[0], inputs[1]);
    case OpKind::Matmul: arity(2); return matmul(inputs[0], inputs[1]);
    case OpKind::Transpose: {
      arity(1);
      const auto& axes = attrs.ints("axes");
      SIM_CHECK(axes.size() == 2, "transpose: 'axes' must hold two entries");
      return transpose(inputs[0], static_cast<int>(axes[0]), static_cast<int>(axes[1]));
    }
    case OpKind::Reshape: arity(1); return reshape(inputs[0], attrs.ints("shape"));
    case OpKind::Concat: return concat(inputs, static_cast<int>(attrs.num("axis")));
    case OpKind::Slice:
      arity(1);
      return slice(inputs[0], static_cast<int>(attrs.num("axis")),
                   static_cast<int64_t>(attrs.num("start")), static_cast<int64_t>(attrs.num("end")));
    case OpKind::Gather: arity(1); return gather_tokens(inputs[0], attrs.ints("indices"));
    case OpKind::GatherFlat: arity(1); return gather_flat(inputs[0], attrs.ints("indices"));
    case OpKind::Sum:
      arity(1);
      if (attrs.has("axis"))
        return sum(inputs[0], static_cast<int>(attrs.num("axis")), attrs.num_or("keepdims", 0) != 0);
      return sum(inputs[0]);
    case OpKind::Mean:
      arity(1);
      if (attrs.has("axis"))
        return mean(inputs[0], static_cast<int>(attrs.num("axis")),
                    attrs.num_or("keepdims", 0) != 0);
      return mean(inputs[0]);
    case OpKind::BroadcastTo: arity(1); return broadcast_to(inputs[0], attrs.ints("shape"));
    case OpKind::Exp: arity(1); return exp(inputs[0]);
    case OpKind::Log: arity(1); return log(inputs[0]);
    case OpKind::Sqrt: arity(1); return sqrt(inputs[0]);
    case OpKind::Power: arity(1); return power(inputs[0], attrs.num("exponent"));
    case OpKind::Gelu: arity(1); return gelu(inputs[0]);
    case OpKind::Softmax: arity(1); return softmax(inputs[0], static_cast<int>(attrs.num("axis")));
    case OpKind::LayerNorm:
      arity(3);
      return layer_norm(inputs[0], inputs[1], inputs[2], static_cast<int>(attrs.num_or("axis", -1)),
                        attrs.num_or("eps", 1e-5));
    case OpKind::BatchNorm:
      arity(5);
      return batch_norm(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4],
                        attrs.num("training") != 0, attrs.num_or("momentum", 0.1),
                        attrs.num_or("eps", 1e-5));
    case OpKind::L2Normalize:
      arity(1);
      return l2_normalize(inputs[0], static_cast<int>(attrs.num_or("axis", -1)),
                          attrs.num_or("eps", 1e-8));
    case OpKind::Scale: arity(1); return scale(inputs[0], attrs.num("value"));
    case OpKind::AddScalar: arity(1); return add_scalar(inputs[0], attrs.num("value"));
    case OpKind::Neg: arity(1); return neg(inputs[0]);
  }
  SIM_CHECK(false, "unknown op kind");
  return {};
}

}  // namespace sim
