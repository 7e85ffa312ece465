#pragma once

#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>

#include "xdial/detail/kernels.hpp"
#include "xdial/tensor.hpp"

// Reverse-mode automatic differentiation on an explicit tape.
//
// A Tape is activated for the current thread on construction and deactivated
// on destruction. While a tape is active, the ops below record one node per
// result; Tape::backward walks the records once in reverse and accumulates
// gradients into every requires_grad leaf reachable from the loss. With no
// active tape the same ops compute plain values.
//
// One tape must never be driven from two threads; tensors that are not linked
// to a tape are immutable values and safe to share.

namespace xdial {

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kTransposeLast2,
  kSigmoid,
  kTanh,
  kRelu,
  kSoftmaxLast,
  kMaskedFill,
  kConcatLast,
  kNarrow,
  kReshape,
  kScale,
  kEmbedLookup,
  kLayerNorm,
  kDropout,
  kSum,
  kNllLoss,
};

template <typename T>
class Tape {
 public:
  using Buffer = std::vector<T>;

  struct Extra {
    MaskTensor mask;        // kMaskedFill/kDropout (expanded), kNllLoss (target mask)
    IdTensor ids;           // kEmbedLookup, kNllLoss targets
    Buffer aux;             // kLayerNorm: xhat then inv_std
    double cval = 0.0;      // kScale factor, kMaskedFill fill, kDropout keep-scale
    std::int64_t i0 = 0;    // kNarrow dim;   kNllLoss unmasked count
    std::int64_t i1 = 0;    // kNarrow start
  };

  struct Node {
    Op op = Op::kLeaf;
    std::vector<std::int32_t> inputs;
    Shape shape;
    std::shared_ptr<Buffer> value;
    Buffer grad;                          // internal nodes, sized lazily
    std::shared_ptr<Buffer> leaf_sink;    // leaves: caller-visible grad buffer
    bool needs_grad = false;
    std::unique_ptr<Extra> extra;
  };

  Tape() : gen_(next_gen()++), prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t generation() const { return gen_; }

  /// Node id for `t`, registering it as a leaf if it is not already on this
  /// tape. Leaves are deduplicated by storage so a parameter used many times
  /// accumulates all path gradients into one buffer.
  std::int32_t ensure_node(const Tensor<T>& t) {
    if (t.node_ >= 0 && t.tape_gen_ == gen_) return t.node_;
    const void* key = t.data_.get();
    auto it = leaf_by_ptr_.find(key);
    if (it != leaf_by_ptr_.end()) return it->second;
    Node n;
    n.op = Op::kLeaf;
    n.shape = t.shape_;
    n.value = t.data_;
    n.needs_grad = t.requires_grad_;
    n.leaf_sink = t.grad_;
    nodes_.push_back(std::move(n));
    const auto id = static_cast<std::int32_t>(nodes_.size() - 1);
    leaf_by_ptr_.emplace(key, id);
    return id;
  }

  Tensor<T> emit(Op op, Shape shape, Buffer value, std::vector<std::int32_t> inputs,
                 std::unique_ptr<Extra> extra = nullptr) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.shape = shape;
    n.value = std::make_shared<Buffer>(std::move(value));
    n.extra = std::move(extra);
    n.needs_grad = false;
    for (auto id : n.inputs) n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(id)].needs_grad;
    Tensor<T> out;
    out.shape_ = std::move(shape);
    out.data_ = n.value;
    out.requires_grad_ = n.needs_grad;
    out.node_ = static_cast<std::int32_t>(nodes_.size());
    out.tape_gen_ = gen_;
    nodes_.push_back(std::move(n));
    return out;
  }

  /// Reverse sweep from a scalar loss. Visits each record at most once, in
  /// reverse topological order; leaf gradients are accumulated (+=) into the
  /// tensors' grad buffers.
  void backward(const Tensor<T>& loss) {
    if (loss.node_ < 0 || loss.tape_gen_ != gen_)
      throw ContractError("backward: loss is not a product of the active tape");
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    const auto root = static_cast<std::size_t>(loss.node_);
    grad_of(root)[0] += T(1);
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.op == Op::kLeaf) continue;
      if (n.grad.empty()) continue;  // not reached from the loss
      step_backward(n);
    }
  }

 private:
  static std::uint64_t& next_gen() {
    static std::uint64_t g = 1;
    return g;
  }

  std::span<T> grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.leaf_sink) return {n.leaf_sink->data(), n.leaf_sink->size()};
    if (n.grad.empty()) n.grad.assign(n.value->size(), T(0));
    return {n.grad.data(), n.grad.size()};
  }

  /// Grad span of an input if it participates, else empty.
  std::span<T> grad_in(const Node& n, std::size_t k) {
    const auto id = static_cast<std::size_t>(n.inputs[k]);
    if (!nodes_[id].needs_grad) return {};
    return grad_of(id);
  }

  const Buffer& value_in(const Node& n, std::size_t k) const {
    return *nodes_[static_cast<std::size_t>(n.inputs[k])].value;
  }
  const Shape& shape_in(const Node& n, std::size_t k) const {
    return nodes_[static_cast<std::size_t>(n.inputs[k])].shape;
  }

  void step_backward(Node& n);

  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::int32_t> leaf_by_ptr_;
  std::uint64_t gen_;
  Tape* prev_;
  static inline thread_local Tape* active_ = nullptr;
};

namespace detail {

/// Iterate the elements of `out_shape`, calling fn(lin, off_a, off_b) where
/// off_a/off_b follow the given (possibly zero) strides.
template <typename Fn>
void for_each_bcast2(const Shape& out_shape, const std::vector<std::int64_t>& sa,
                     const std::vector<std::int64_t>& sb, Fn&& fn) {
  const int rank = static_cast<int>(out_shape.size());
  const std::int64_t n = shape_numel(out_shape);
  if (rank == 0) {
    if (n > 0) fn(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t lin = 0; lin < n; ++lin) {
    fn(lin, oa, ob);
    for (int d = rank - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      oa += sa[du];
      ob += sb[du];
      if (idx[du] < out_shape[du]) break;
      oa -= sa[du] * out_shape[du];
      ob -= sb[du] * out_shape[du];
      idx[du] = 0;
    }
  }
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* opname) {
  const int rank = static_cast<int>(std::max(a.size(), b.size()));
  Shape out(static_cast<std::size_t>(rank));
  for (int d = 0; d < rank; ++d) {
    const int ia = d - (rank - static_cast<int>(a.size()));
    const int ib = d - (rank - static_cast<int>(b.size()));
    const std::int64_t da = ia < 0 ? 1 : a[static_cast<std::size_t>(ia)];
    const std::int64_t db = ib < 0 ? 1 : b[static_cast<std::size_t>(ib)];
    if (da != db && da != 1 && db != 1)
      throw DimError(std::string(opname) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
    out[static_cast<std::size_t>(d)] = std::max(da, db);
  }
  return out;
}

/// Strides over the padded `out` shape for source `shape` (0 on broadcast dims).
inline std::vector<std::int64_t> bcast_strides(const Shape& shape, const Shape& out) {
  return ::xdial::detail::broadcast_strides(shape, out, static_cast<int>(out.size()));
}

/// Expand a mask to `out` shape (byte per element).
inline MaskTensor expand_mask(const MaskTensor& m, const Shape& out, const char* opname) {
  Shape ms = m.shape;
  broadcast_shape(ms, out, opname);  // validates compatibility
  for (std::size_t d = 0; d < ms.size(); ++d) {
    const std::size_t od = out.size() - ms.size() + d;
    if (ms[d] != 1 && ms[d] != out[od])
      throw DimError(std::string(opname) + ": mask shape " + shape_str(m.shape) +
                     " not broadcastable to " + shape_str(out));
  }
  MaskTensor e(out, false);
  const auto sm = bcast_strides(ms, out);
  const auto zero = std::vector<std::int64_t>(out.size(), 0);
  for_each_bcast2(out, sm, zero,
                  [&](std::int64_t lin, std::int64_t om, std::int64_t) { e.data[static_cast<std::size_t>(lin)] = m.data[static_cast<std::size_t>(om)]; });
  return e;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Op entry points
// ---------------------------------------------------------------------------

enum class EwiseKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> ewise(EwiseKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  const char* name = kind == EwiseKind::kAdd ? "add" : kind == EwiseKind::kSub ? "sub" : "mul";
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), name);
  const auto sa = detail::bcast_strides(a.shape(), out_shape);
  const auto sb = detail::bcast_strides(b.shape(), out_shape);
  typename Tape<T>::Buffer out(static_cast<std::size_t>(shape_numel(out_shape)));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (a.shape() == b.shape()) {
    const std::size_t n = out.size();
    switch (kind) {
      case EwiseKind::kAdd:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
        break;
      case EwiseKind::kSub:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
        break;
      case EwiseKind::kMul:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
        break;
    }
  } else {
    detail::for_each_bcast2(out_shape, sa, sb, [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
      const auto l = static_cast<std::size_t>(lin);
      switch (kind) {
        case EwiseKind::kAdd: out[l] = pa[oa] + pb[ob]; break;
        case EwiseKind::kSub: out[l] = pa[oa] - pb[ob]; break;
        case EwiseKind::kMul: out[l] = pa[oa] * pb[ob]; break;
      }
    });
  }
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(out_shape, std::move(out));
  const Op op = kind == EwiseKind::kAdd ? Op::kAdd : kind == EwiseKind::kSub ? Op::kSub : Op::kMul;
  return tape->emit(op, out_shape, std::move(out), {tape->ensure_node(a), tape->ensure_node(b)});
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return ewise(EwiseKind::kAdd, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return ewise(EwiseKind::kSub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return ewise(EwiseKind::kMul, a, b);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
  const std::int64_t p = a.dim(-2), q = a.dim(-1);
  const std::int64_t q2 = b.dim(-2), r = b.dim(-1);
  if (q != q2)
    throw DimError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = detail::broadcast_shape(abatch, bbatch, "matmul");
  Shape out_shape = batch;
  out_shape.push_back(p);
  out_shape.push_back(r);

  auto sa = detail::bcast_strides(abatch, batch);
  auto sb = detail::bcast_strides(bbatch, batch);
  for (auto& s : sa) s *= p * q;
  for (auto& s : sb) s *= q * r;

  typename Tape<T>::Buffer out(static_cast<std::size_t>(shape_numel(out_shape)));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const std::int64_t mat = p * r;
  detail::for_each_bcast2(batch, sa, sb, [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
    ::xdial::detail::gemm(pa + oa, pb + ob, out.data() + lin * mat, p, q, r);
  });
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(out_shape, std::move(out));
  return tape->emit(Op::kMatMul, out_shape, std::move(out),
                    {tape->ensure_node(a), tape->ensure_node(b)});
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimError("transpose_last2: rank < 2, got " + shape_str(x.shape()));
  const std::int64_t m = x.dim(-2), n = x.dim(-1);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  const std::int64_t batches = x.numel() / (m * n);
  typename Tape<T>::Buffer out(static_cast<std::size_t>(x.numel()));
  const T* px = x.data().data();
  for (std::int64_t bi = 0; bi < batches; ++bi) {
    const T* src = px + bi * m * n;
    T* dst = out.data() + bi * m * n;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(out_shape, std::move(out));
  return tape->emit(Op::kTransposeLast2, out_shape, std::move(out), {tape->ensure_node(x)});
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  typename Tape<T>::Buffer out(static_cast<std::size_t>(x.numel()));
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ::xdial::detail::sigmoid_scalar(px[i]);
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(x.shape(), std::move(out));
  return tape->emit(Op::kSigmoid, x.shape(), std::move(out), {tape->ensure_node(x)});
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  typename Tape<T>::Buffer out(static_cast<std::size_t>(x.numel()));
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(px[i]);
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(x.shape(), std::move(out));
  return tape->emit(Op::kTanh, x.shape(), std::move(out), {tape->ensure_node(x)});
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  typename Tape<T>::Buffer out(static_cast<std::size_t>(x.numel()));
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] > T(0) ? px[i] : T(0);
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(x.shape(), std::move(out));
  return tape->emit(Op::kRelu, x.shape(), std::move(out), {tape->ensure_node(x)});
}

/// Overflow-safe softmax along the last dimension (max subtraction).
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::int64_t cols = x.dim(-1);
  if (cols < 1) throw DimError("softmax_lastdim: empty last dimension " + shape_str(x.shape()));
  const std::int64_t rows = x.numel() / cols;
  typename Tape<T>::Buffer out(static_cast<std::size_t>(x.numel()));
  ::xdial::detail::softmax_rows(x.data().data(), out.data(), rows, cols);
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(x.shape(), std::move(out));
  return tape->emit(Op::kSoftmaxLast, x.shape(), std::move(out), {tape->ensure_node(x)});
}

/// Replace positions where mask is true by `value`. Gradient is zero at the
/// filled positions.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, const MaskTensor& mask, T value) {
  MaskTensor em = detail::expand_mask(mask, x.shape(), "masked_fill");
  typename Tape<T>::Buffer out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (em.data[i]) out[i] = value;
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(x.shape(), std::move(out));
  auto extra = std::make_unique<typename Tape<T>::Extra>();
  extra->mask = std::move(em);
  extra->cval = static_cast<double>(value);
  return tape->emit(Op::kMaskedFill, x.shape(), std::move(out), {tape->ensure_node(x)},
                    std::move(extra));
}

template <typename T>
Tensor<T> concat_lastdim(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_lastdim: no parts");
  const Shape& lead = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank())
      throw DimError("concat_lastdim: rank mismatch " + shape_str(p.shape()) + " vs " +
                     shape_str(lead));
    for (int d = 0; d + 1 < p.rank(); ++d)
      if (p.dim(d) != parts[0].dim(d))
        throw DimError("concat_lastdim: leading dims differ, " + shape_str(p.shape()) + " vs " +
                       shape_str(lead));
    total += p.dim(-1);
  }
  Shape out_shape = lead;
  out_shape.back() = total;
  const std::int64_t rows = shape_numel(out_shape) / total;
  typename Tape<T>::Buffer out(static_cast<std::size_t>(rows * total));
  std::int64_t col = 0;
  for (const auto& p : parts) {
    const std::int64_t w = p.dim(-1);
    const T* src = p.data().data();
    for (std::int64_t i = 0; i < rows; ++i)
      std::memcpy(out.data() + i * total + col, src + i * w, sizeof(T) * static_cast<std::size_t>(w));
    col += w;
  }
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(out_shape, std::move(out));
  std::vector<std::int32_t> ids;
  ids.reserve(parts.size());
  for (const auto& p : parts) ids.push_back(tape->ensure_node(p));
  return tape->emit(Op::kConcatLast, out_shape, std::move(out), std::move(ids));
}

/// Contiguous slice [start, start+len) along `dim` (negative dims allowed).
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int dim, std::int64_t start, std::int64_t len) {
  if (dim < 0) dim += x.rank();
  if (dim < 0 || dim >= x.rank()) throw DimError("narrow: bad dim");
  const std::int64_t size = x.dim(dim);
  if (start < 0 || len < 0 || start + len > size)
    throw DimError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                   ") out of " + std::to_string(size));
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < dim; ++d) outer *= x.dim(d);
  for (int d = dim + 1; d < x.rank(); ++d) inner *= x.dim(d);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(dim)] = len;
  typename Tape<T>::Buffer out(static_cast<std::size_t>(outer * len * inner));
  const T* px = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, px + (o * size + start) * inner,
                sizeof(T) * static_cast<std::size_t>(len * inner));
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(out_shape, std::move(out));
  auto extra = std::make_unique<typename Tape<T>::Extra>();
  extra->i0 = dim;
  extra->i1 = start;
  return tape->emit(Op::kNarrow, out_shape, std::move(out), {tape->ensure_node(x)},
                    std::move(extra));
}

template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& x, std::int64_t start, std::int64_t len) {
  return narrow(x, -1, start, len);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw DimError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  typename Tape<T>::Buffer out(x.data().begin(), x.data().end());
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(std::move(new_shape), std::move(out));
  return tape->emit(Op::kReshape, std::move(new_shape), std::move(out), {tape->ensure_node(x)});
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  typename Tape<T>::Buffer out(static_cast<std::size_t>(x.numel()));
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * px[i];
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(x.shape(), std::move(out));
  auto extra = std::make_unique<typename Tape<T>::Extra>();
  extra->cval = static_cast<double>(c);
  return tape->emit(Op::kScale, x.shape(), std::move(out), {tape->ensure_node(x)},
                    std::move(extra));
}

/// Row lookup: out[..., :] = table[ids[...], :]. Gradients scatter-add into
/// the table, so a repeated id accumulates the gradient of every position.
template <typename T>
Tensor<T> embed_lookup(const Tensor<T>& table, const IdTensor& ids) {
  if (table.rank() != 2) throw DimError("embed_lookup: table must be [V,d], got " + shape_str(table.shape()));
  const std::int64_t v = table.dim(0), d = table.dim(1);
  for (auto id : ids.data)
    if (id < 0 || id >= v)
      throw IndexError("embed_lookup: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(v) + ")");
  Shape out_shape = ids.shape;
  out_shape.push_back(d);
  typename Tape<T>::Buffer out(static_cast<std::size_t>(ids.numel() * d));
  const T* pt = table.data().data();
  for (std::int64_t i = 0; i < ids.numel(); ++i)
    std::memcpy(out.data() + i * d, pt + static_cast<std::int64_t>(ids.data[static_cast<std::size_t>(i)]) * d,
                sizeof(T) * static_cast<std::size_t>(d));
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(out_shape, std::move(out));
  auto extra = std::make_unique<typename Tape<T>::Extra>();
  extra->ids = ids;
  return tape->emit(Op::kEmbedLookup, out_shape, std::move(out), {tape->ensure_node(table)},
                    std::move(extra));
}

/// Layer normalization over the last dimension: gain * (x - mean)/std + bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const std::int64_t cols = x.dim(-1);
  if (gain.numel() != cols || bias.numel() != cols)
    throw DimError("layer_norm: gain/bias must have " + std::to_string(cols) + " elements");
  const std::int64_t rows = x.numel() / cols;
  typename Tape<T>::Buffer out(static_cast<std::size_t>(x.numel()));
  typename Tape<T>::Buffer aux(static_cast<std::size_t>(x.numel() + rows));
  const T* px = x.data().data();
  const T* pg = gain.data().data();
  const T* pb = bias.data().data();
  T* xhat = aux.data();
  T* inv_std = aux.data() + x.numel();
  for (std::int64_t i = 0; i < rows; ++i) {
    const T* row = px + i * cols;
    T mean = T(0);
    for (std::int64_t j = 0; j < cols; ++j) mean += row[j];
    mean /= static_cast<T>(cols);
    T var = T(0);
    for (std::int64_t j = 0; j < cols; ++j) {
      const T c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(cols);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    T* orow = out.data() + i * cols;
    T* hrow = xhat + i * cols;
    for (std::int64_t j = 0; j < cols; ++j) {
      hrow[j] = (row[j] - mean) * is;
      orow[j] = hrow[j] * pg[j] + pb[j];
    }
  }
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(x.shape(), std::move(out));
  auto extra = std::make_unique<typename Tape<T>::Extra>();
  extra->aux = std::move(aux);
  return tape->emit(Op::kLayerNorm, x.shape(), std::move(out),
                    {tape->ensure_node(x), tape->ensure_node(gain), tape->ensure_node(bias)},
                    std::move(extra));
}

/// Inverted dropout: kept positions scaled by 1/(1-p). `p==0` is the identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout: rate must be < 1");
  MaskTensor keep(x.shape(), false);
  for (auto& m : keep.data) m = rng.next_unit() >= p ? 1 : 0;
  const T s = static_cast<T>(1.0 / (1.0 - p));
  typename Tape<T>::Buffer out(static_cast<std::size_t>(x.numel()));
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep.data[i] ? px[i] * s : T(0);
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(x.shape(), std::move(out));
  auto extra = std::make_unique<typename Tape<T>::Extra>();
  extra->mask = std::move(keep);
  extra->cval = static_cast<double>(s);
  return tape->emit(Op::kDropout, x.shape(), std::move(out), {tape->ensure_node(x)},
                    std::move(extra));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  typename Tape<T>::Buffer out{acc};
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(Shape{1}, std::move(out));
  return tape->emit(Op::kSum, Shape{1}, std::move(out), {tape->ensure_node(x)});
}

/// Mean over masked positions of -log softmax(logits)[target]. Logits have
/// shape [..., V]; targets and mask share the leading shape. Masked-out
/// positions contribute nothing to the value or the gradient.
template <typename T>
Tensor<T> nll_loss_masked(const Tensor<T>& logits, const IdTensor& targets,
                          const MaskTensor& mask) {
  const std::int64_t v = logits.dim(-1);
  Shape lead(logits.shape().begin(), logits.shape().end() - 1);
  if (targets.shape != lead || mask.shape != lead)
    throw DimError("nll_loss: targets/mask shape must be " + shape_str(lead));
  const std::int64_t rows = logits.numel() / v;
  const T* pl = logits.data().data();
  std::int64_t count = 0;
  double acc = 0.0;
  for (std::int64_t i = 0; i < rows; ++i) {
    if (!mask.data[static_cast<std::size_t>(i)]) continue;
    const auto t = targets.data[static_cast<std::size_t>(i)];
    if (t < 0 || t >= v)
      throw IndexError("nll_loss: target id " + std::to_string(t) + " out of range [0," +
                       std::to_string(v) + ")");
    const T* row = pl + i * v;
    acc += static_cast<double>(::xdial::detail::logsumexp_row(row, v) - row[t]);
    ++count;
  }
  if (count == 0) throw ContractError("nll_loss: no unmasked target positions");
  typename Tape<T>::Buffer out{static_cast<T>(acc / static_cast<double>(count))};
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return Tensor<T>(Shape{1}, std::move(out));
  auto extra = std::make_unique<typename Tape<T>::Extra>();
  extra->ids = targets;
  extra->mask = mask;
  extra->i0 = count;
  return tape->emit(Op::kNllLoss, Shape{1}, std::move(out), {tape->ensure_node(logits)},
                    std::move(extra));
}

/// Backward through the active tape (see Tape::backward).
template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw ContractError("backward: no active tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Backward dispatch
// ---------------------------------------------------------------------------

template <typename T>
void Tape<T>::step_backward(Node& n) {
  const std::span<const T> g{n.grad.data(), n.grad.size()};
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      const Shape& as = shape_in(n, 0);
      const Shape& bs = shape_in(n, 1);
      auto ga = grad_in(n, 0);
      auto gb = grad_in(n, 1);
      const T* pa = value_in(n, 0).data();
      const T* pb = value_in(n, 1).data();
      if (as == n.shape && bs == n.shape) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T go = g[i];
          switch (n.op) {
            case Op::kAdd:
              if (!ga.empty()) ga[i] += go;
              if (!gb.empty()) gb[i] += go;
              break;
            case Op::kSub:
              if (!ga.empty()) ga[i] += go;
              if (!gb.empty()) gb[i] -= go;
              break;
            default:
              if (!ga.empty()) ga[i] += go * pb[i];
              if (!gb.empty()) gb[i] += go * pa[i];
          }
        }
        break;
      }
      const auto sa = detail::bcast_strides(as, n.shape);
      const auto sb = detail::bcast_strides(bs, n.shape);
      detail::for_each_bcast2(n.shape, sa, sb, [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
        const T go = g[static_cast<std::size_t>(lin)];
        switch (n.op) {
          case Op::kAdd:
            if (!ga.empty()) ga[static_cast<std::size_t>(oa)] += go;
            if (!gb.empty()) gb[static_cast<std::size_t>(ob)] += go;
            break;
          case Op::kSub:
            if (!ga.empty()) ga[static_cast<std::size_t>(oa)] += go;
            if (!gb.empty()) gb[static_cast<std::size_t>(ob)] -= go;
            break;
          default:  // kMul
            if (!ga.empty()) ga[static_cast<std::size_t>(oa)] += go * pb[ob];
            if (!gb.empty()) gb[static_cast<std::size_t>(ob)] += go * pa[oa];
        }
      });
      break;
    }
    case Op::kMatMul: {
      const Shape& as = shape_in(n, 0);
      const Shape& bs = shape_in(n, 1);
      const std::int64_t p = as[as.size() - 2], q = as.back(), r = bs.back();
      Shape abatch(as.begin(), as.end() - 2);
      Shape bbatch(bs.begin(), bs.end() - 2);
      Shape batch(n.shape.begin(), n.shape.end() - 2);
      auto sa = detail::bcast_strides(abatch, batch);
      auto sb = detail::bcast_strides(bbatch, batch);
      for (auto& s : sa) s *= p * q;
      for (auto& s : sb) s *= q * r;
      auto ga = grad_in(n, 0);
      auto gb = grad_in(n, 1);
      const T* pa = value_in(n, 0).data();
      const T* pb = value_in(n, 1).data();
      const std::int64_t mat = p * r;
      detail::for_each_bcast2(batch, sa, sb, [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
        const T* gout = g.data() + lin * mat;
        if (!ga.empty()) ::xdial::detail::gemm_acc_nt(gout, pb + ob, ga.data() + oa, p, q, r);
        if (!gb.empty()) ::xdial::detail::gemm_acc_tn(pa + oa, gout, gb.data() + ob, p, q, r);
      });
      break;
    }
    case Op::kTransposeLast2: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      const std::int64_t m = n.shape[n.shape.size() - 2], c = n.shape.back();
      const std::int64_t batches = static_cast<std::int64_t>(g.size()) / (m * c);
      for (std::int64_t bi = 0; bi < batches; ++bi) {
        const T* src = g.data() + bi * m * c;
        T* dst = ga.data() + bi * m * c;
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < c; ++j) dst[j * m + i] += src[i * c + j];
      }
      break;
    }
    case Op::kSigmoid: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      const T* y = n.value->data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
      break;
    }
    case Op::kTanh: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      const T* y = n.value->data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
      break;
    }
    case Op::kRelu: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      const T* x = value_in(n, 0).data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) ga[i] += g[i];
      break;
    }
    case Op::kSoftmaxLast: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      const T* y = n.value->data();
      const std::int64_t cols = n.shape.back();
      const std::int64_t rows = static_cast<std::int64_t>(g.size()) / cols;
      for (std::int64_t i = 0; i < rows; ++i) {
        const T* yr = y + i * cols;
        const T* gr = g.data() + i * cols;
        T dot = T(0);
        for (std::int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
        T* gar = ga.data() + i * cols;
        for (std::int64_t j = 0; j < cols; ++j) gar[j] += yr[j] * (gr[j] - dot);
      }
      break;
    }
    case Op::kMaskedFill: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      const auto& m = n.extra->mask.data;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!m[i]) ga[i] += g[i];
      break;
    }
    case Op::kConcatLast: {
      const std::int64_t total = n.shape.back();
      const std::int64_t rows = static_cast<std::int64_t>(g.size()) / total;
      std::int64_t col = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::int64_t w = shape_in(n, k).back();
        auto gk = grad_in(n, k);
        if (!gk.empty())
          for (std::int64_t i = 0; i < rows; ++i) {
            const T* src = g.data() + i * total + col;
            T* dst = gk.data() + i * w;
            for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
          }
        col += w;
      }
      break;
    }
    case Op::kNarrow: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      const Shape& xs = shape_in(n, 0);
      const int dim = static_cast<int>(n.extra->i0);
      const std::int64_t start = n.extra->i1;
      const std::int64_t len = n.shape[static_cast<std::size_t>(dim)];
      const std::int64_t size = xs[static_cast<std::size_t>(dim)];
      std::int64_t outer = 1, inner = 1;
      for (int d = 0; d < dim; ++d) outer *= xs[static_cast<std::size_t>(d)];
      for (int d = dim + 1; d < static_cast<int>(xs.size()); ++d) inner *= xs[static_cast<std::size_t>(d)];
      for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = g.data() + o * len * inner;
        T* dst = ga.data() + (o * size + start) * inner;
        for (std::int64_t j = 0; j < len * inner; ++j) dst[j] += src[j];
      }
      break;
    }
    case Op::kReshape: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      break;
    }
    case Op::kScale: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      const T c = static_cast<T>(n.extra->cval);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
      break;
    }
    case Op::kEmbedLookup: {
      auto gt = grad_in(n, 0);
      if (gt.empty()) break;
      const auto& ids = n.extra->ids;
      const std::int64_t d = n.shape.back();
      for (std::int64_t i = 0; i < ids.numel(); ++i) {
        const T* src = g.data() + i * d;
        T* dst = gt.data() + static_cast<std::int64_t>(ids.data[static_cast<std::size_t>(i)]) * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
      break;
    }
    case Op::kLayerNorm: {
      const std::int64_t cols = n.shape.back();
      const std::int64_t rows = static_cast<std::int64_t>(g.size()) / cols;
      const T* xhat = n.extra->aux.data();
      const T* inv_std = n.extra->aux.data() + g.size();
      const T* pg = value_in(n, 1).data();
      auto gx = grad_in(n, 0);
      auto gg = grad_in(n, 1);
      auto gb = grad_in(n, 2);
      for (std::int64_t i = 0; i < rows; ++i) {
        const T* gr = g.data() + i * cols;
        const T* hr = xhat + i * cols;
        if (!gg.empty())
          for (std::int64_t j = 0; j < cols; ++j) gg[static_cast<std::size_t>(j)] += gr[j] * hr[j];
        if (!gb.empty())
          for (std::int64_t j = 0; j < cols; ++j) gb[static_cast<std::size_t>(j)] += gr[j];
        if (!gx.empty()) {
          T mean_dh = T(0), mean_dh_h = T(0);
          for (std::int64_t j = 0; j < cols; ++j) {
            const T dh = gr[j] * pg[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
          }
          mean_dh /= static_cast<T>(cols);
          mean_dh_h /= static_cast<T>(cols);
          T* gxr = gx.data() + i * cols;
          for (std::int64_t j = 0; j < cols; ++j) {
            const T dh = gr[j] * pg[j];
            gxr[j] += inv_std[i] * (dh - mean_dh - hr[j] * mean_dh_h);
          }
        }
      }
      break;
    }
    case Op::kDropout: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      const auto& keep = n.extra->mask.data;
      const T s = static_cast<T>(n.extra->cval);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (keep[i]) ga[i] += g[i] * s;
      break;
    }
    case Op::kSum: {
      auto ga = grad_in(n, 0);
      if (ga.empty()) break;
      const T go = g[0];
      for (auto& v : ga) v += go;
      break;
    }
    case Op::kNllLoss: {
      auto gl = grad_in(n, 0);
      if (gl.empty()) break;
      const T go = g[0];
      const auto& logits = value_in(n, 0);
      const Shape& ls = shape_in(n, 0);
      const std::int64_t v = ls.back();
      const std::int64_t rows = static_cast<std::int64_t>(logits.size()) / v;
      const T invc = T(1) / static_cast<T>(n.extra->i0);
      std::vector<T> prob(static_cast<std::size_t>(v));
      for (std::int64_t i = 0; i < rows; ++i) {
        if (!n.extra->mask.data[static_cast<std::size_t>(i)]) continue;
        ::xdial::detail::softmax_rows(logits.data() + i * v, prob.data(), 1, v);
        T* dst = gl.data() + i * v;
        for (std::int64_t j = 0; j < v; ++j) dst[j] += go * invc * prob[static_cast<std::size_t>(j)];
        dst[n.extra->ids.data[static_cast<std::size_t>(i)]] -= go * invc;
      }
      break;
    }
  }
}

}  // namespace xdial
