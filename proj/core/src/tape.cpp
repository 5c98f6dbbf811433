// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#include "seqloom/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace seqloom {

namespace {

using EigenMatrix =
    Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMatrix>;
using ConstMatMap = Eigen::Map<const EigenMatrix>;

std::optional<std::vector<std::int32_t>> merge_seq_lens(const Tensor& a, const Tensor& b) {
  if (a.seq_lens() && b.seq_lens()) {
    if (*a.seq_lens() != *b.seq_lens()) {
      throw ShapeError("seq_lens disagree between operands");
    }
    return a.seq_lens();
  }
  if (a.seq_lens()) return a.seq_lens();
  return b.seq_lens();
}

// Keeps lens only when the result still has a Time axis of matching extent.
void carry_seq_lens(Tensor& out, const std::optional<std::vector<std::int32_t>>& lens) {
  if (!lens) return;
  if (!out.has_axis(Axis::Time) || !out.has_axis(Axis::Batch)) return;
  if (out.extent(Axis::Batch) != static_cast<std::int64_t>(lens->size())) return;
  out.set_seq_lens(*lens);
}

struct AxisSplit {
  std::int64_t outer = 1;   // product of extents before the axis
  std::int64_t extent = 1;  // the axis itself
  std::int64_t inner = 1;   // product of extents after the axis
  int index = -1;
};

AxisSplit split_at_axis(const Shape& shape, Axis axis) {
  AxisSplit s;
  s.index = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i].axis == axis) {
      s.index = static_cast<int>(i);
      s.extent = shape[i].extent;
    } else if (s.index < 0) {
      s.outer *= shape[i].extent;
    } else {
      s.inner *= shape[i].extent;
    }
  }
  return s;
}

// For masked ops: batch index of a flat position, given the Batch split.
inline std::int64_t batch_of(std::int64_t flat, const AxisSplit& b) {
  return (flat / b.inner) % b.extent;
}

inline bool survives_dropout(const DropoutKey& key, std::int64_t step_component,
                             std::int64_t pos, Real rate) {
  return u01(mix64(key.key, mix64(static_cast<std::uint64_t>(step_component),
                                  static_cast<std::uint64_t>(pos)))) >=
         static_cast<double>(rate);
}

}  // namespace

void GradBuffer::accumulate(NodeId id, Tensor g) {
  auto& slot = grads_[static_cast<std::size_t>(id)];
  if (!slot) {
    slot = std::move(g);
    return;
  }
  if (slot->shape() != g.shape()) {
    throw ShapeError("gradient shape mismatch: " + shape_to_string(slot->shape()) +
                     " vs " + shape_to_string(g.shape()));
  }
  auto dst = slot->data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

const Tensor* GradBuffer::get(NodeId id) const {
  const auto& slot = grads_[static_cast<std::size_t>(id)];
  return slot ? &*slot : nullptr;
}

Tensor GradBuffer::get_or_zeros(NodeId id, const Shape& shape) const {
  const Tensor* g = get(id);
  if (g) return *g;
  return Tensor::zeros(shape);
}

NodeId Tape::emit(Tensor value, bool needs_grad, std::string tag) {
  nodes_.push_back(Node{std::move(value), grad_enabled_ && needs_grad, std::move(tag)});
  return static_cast<NodeId>(nodes_.size() - 1);
}

bool Tape::any_needs_grad(std::initializer_list<NodeId> ids) const {
  if (!grad_enabled_) return false;
  for (NodeId id : ids) {
    if (id != kNoNode && nodes_[static_cast<std::size_t>(id)].needs_grad) return true;
  }
  return false;
}

void Tape::record(std::vector<NodeId> inputs, std::vector<NodeId> outputs,
                  std::function<void(const Tape&, GradBuffer&)> fn) {
  records_.push_back(Record{std::move(inputs), std::move(outputs), std::move(fn)});
}

NodeId Tape::constant(Tensor value, std::string tag) {
  return emit(std::move(value), false, std::move(tag));
}

NodeId Tape::param(const std::string& name, Tensor value) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    throw std::runtime_error("parameter registered twice: " + name);
  }
  NodeId id = emit(std::move(value), true, name);
  params_.emplace(name, id);
  return id;
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  auto plan = make_broadcast_plan(ta.shape(), tb.shape());
  Tensor out = Tensor::zeros(plan.out_shape);
  const auto da = ta.data();
  const auto db = tb.data();
  auto dst = out.data();
  std::int64_t n = out.size();
  if (ta.shape() == tb.shape()) {
    for (std::int64_t i = 0; i < n; ++i) dst[i] = da[i] + db[i];
  } else {
    std::vector<std::int64_t> coord(plan.out_shape.size(), 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      dst[i] = da[static_cast<std::size_t>(ia)] + db[static_cast<std::size_t>(ib)];
      for (int d = static_cast<int>(plan.out_shape.size()) - 1; d >= 0; --d) {
        coord[d]++;
        ia += plan.lhs_strides[d];
        ib += plan.rhs_strides[d];
        if (coord[d] < plan.out_shape[d].extent) break;
        ia -= plan.lhs_strides[d] * plan.out_shape[d].extent;
        ib -= plan.rhs_strides[d] * plan.out_shape[d].extent;
        coord[d] = 0;
      }
    }
  }
  carry_seq_lens(out, merge_seq_lens(ta, tb));
  bool ng = any_needs_grad({a, b});
  Shape sa = ta.shape(), sb = tb.shape();
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({a, b}, {id}, [a, b, id, sa, sb](const Tape& t, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go) return;
      if (t.needs_grad(a)) g.accumulate(a, reduce_to_shape(*go, sa));
      if (t.needs_grad(b)) g.accumulate(b, reduce_to_shape(*go, sb));
    });
  }
  return id;
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  auto plan = make_broadcast_plan(ta.shape(), tb.shape());
  Tensor out = Tensor::zeros(plan.out_shape);
  const auto da = ta.data();
  const auto db = tb.data();
  auto dst = out.data();
  std::int64_t n = out.size();
  std::vector<std::int64_t> coord(plan.out_shape.size(), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    dst[i] = da[static_cast<std::size_t>(ia)] * db[static_cast<std::size_t>(ib)];
    for (int d = static_cast<int>(plan.out_shape.size()) - 1; d >= 0; --d) {
      coord[d]++;
      ia += plan.lhs_strides[d];
      ib += plan.rhs_strides[d];
      if (coord[d] < plan.out_shape[d].extent) break;
      ia -= plan.lhs_strides[d] * plan.out_shape[d].extent;
      ib -= plan.rhs_strides[d] * plan.out_shape[d].extent;
      coord[d] = 0;
    }
  }
  carry_seq_lens(out, merge_seq_lens(ta, tb));
  bool ng = any_needs_grad({a, b});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({a, b}, {id}, [a, b, id, plan](const Tape& t, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go) return;
      const Tensor& ta = t.value(a);
      const Tensor& tb = t.value(b);
      // d a = g * b (broadcast), reduced back to a's shape; symmetric for b.
      auto scatter = [&](const Tensor& other, const std::vector<std::int64_t>& strides,
                         const Shape& target) {
        Tensor tmp = Tensor::zeros(go->shape());
        auto dst = tmp.data();
        const auto gg = go->data();
        const auto dother = other.data();
        std::vector<std::int64_t> coord(plan.out_shape.size(), 0);
        std::int64_t io = 0;
        for (std::int64_t i = 0; i < tmp.size(); ++i) {
          dst[i] = gg[i] * dother[static_cast<std::size_t>(io)];
          for (int d = static_cast<int>(plan.out_shape.size()) - 1; d >= 0; --d) {
            coord[d]++;
            io += strides[d];
            if (coord[d] < plan.out_shape[d].extent) break;
            io -= strides[d] * plan.out_shape[d].extent;
            coord[d] = 0;
          }
        }
        return reduce_to_shape(tmp, target);
      };
      if (t.needs_grad(a)) g.accumulate(a, scatter(tb, plan.rhs_strides, ta.shape()));
      if (t.needs_grad(b)) g.accumulate(b, scatter(ta, plan.lhs_strides, tb.shape()));
    });
  }
  return id;
}

NodeId Tape::unary(EwKind kind, NodeId x) {
  const Tensor& tx = value(x);
  Tensor out = Tensor::zeros(tx.shape());
  const auto src = tx.data();
  auto dst = out.data();
  std::int64_t n = out.size();
  switch (kind) {
    case EwKind::Tanh:
      for (std::int64_t i = 0; i < n; ++i) dst[i] = std::tanh(src[i]);
      break;
    case EwKind::Sigmoid:
      for (std::int64_t i = 0; i < n; ++i) dst[i] = Real(1) / (Real(1) + std::exp(-src[i]));
      break;
    case EwKind::Relu:
      for (std::int64_t i = 0; i < n; ++i) dst[i] = src[i] > Real(0) ? src[i] : Real(0);
      break;
    case EwKind::Exp:
      for (std::int64_t i = 0; i < n; ++i) dst[i] = std::exp(src[i]);
      break;
    case EwKind::Log:
      // log of a non-positive value yields NaN/-inf and propagates; loss
      // finiteness checks catch it downstream.
      for (std::int64_t i = 0; i < n; ++i) dst[i] = std::log(src[i]);
      break;
    case EwKind::Add:
    case EwKind::Mul:
      throw std::logic_error("binary kind passed to unary");
  }
  carry_seq_lens(out, tx.seq_lens());
  bool ng = any_needs_grad({x});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({x}, {id}, [x, id, kind](const Tape& t, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go || !t.needs_grad(x)) return;
      const Tensor& y = t.value(id);
      const Tensor& in = t.value(x);
      Tensor gx = Tensor::zeros(in.shape());
      auto d = gx.data();
      const auto gg = go->data();
      const auto dy = y.data();
      const auto dx = in.data();
      std::int64_t n = gx.size();
      switch (kind) {
        case EwKind::Tanh:
          for (std::int64_t i = 0; i < n; ++i) d[i] = gg[i] * (Real(1) - dy[i] * dy[i]);
          break;
        case EwKind::Sigmoid:
          for (std::int64_t i = 0; i < n; ++i) d[i] = gg[i] * dy[i] * (Real(1) - dy[i]);
          break;
        case EwKind::Relu:
          for (std::int64_t i = 0; i < n; ++i) d[i] = dx[i] > Real(0) ? gg[i] : Real(0);
          break;
        case EwKind::Exp:
          for (std::int64_t i = 0; i < n; ++i) d[i] = gg[i] * dy[i];
          break;
        case EwKind::Log:
          for (std::int64_t i = 0; i < n; ++i) d[i] = gg[i] / dx[i];
          break;
        default:
          break;
      }
      g.accumulate(x, std::move(gx));
    });
  }
  return id;
}

NodeId Tape::scale(NodeId x, Real factor) {
  const Tensor& tx = value(x);
  Tensor out = Tensor::zeros(tx.shape());
  const auto src = tx.data();
  auto dst = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) dst[i] = src[i] * factor;
  carry_seq_lens(out, tx.seq_lens());
  bool ng = any_needs_grad({x});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({x}, {id}, [x, id, factor](const Tape& t, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go || !t.needs_grad(x)) return;
      Tensor gx = Tensor::zeros(t.value(x).shape());
      auto d = gx.data();
      const auto gg = go->data();
      for (std::int64_t i = 0; i < gx.size(); ++i) d[i] = gg[i] * factor;
      g.accumulate(x, std::move(gx));
    });
  }
  return id;
}

NodeId Tape::matmul(NodeId x, NodeId weight) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(weight);
  const Shape& xs = tx.shape();
  const Shape& ws = tw.shape();
  if (xs.empty() || xs.back().axis != Axis::Feature) {
    throw ShapeError("matmul: left operand must end in a Feature axis, got " +
                     shape_to_string(xs) + " x " + shape_to_string(ws));
  }
  if (ws.size() != 2 || ws[0].axis != Axis::Feature || ws[1].axis != Axis::Other) {
    throw ShapeError("matmul: weight must be [Feature, Other], got " +
                     shape_to_string(xs) + " x " + shape_to_string(ws));
  }
  std::int64_t k = xs.back().extent;
  if (k != ws[0].extent) {
    throw ShapeError("matmul: inner extents disagree: " + shape_to_string(xs) + " x " +
                     shape_to_string(ws));
  }
  std::int64_t n_out = ws[1].extent;
  std::int64_t rows = tx.size() / k;
  Shape out_shape(xs.begin(), xs.end() - 1);
  out_shape.push_back({Axis::Feature, n_out});
  Tensor out = Tensor::zeros(out_shape);
  {
    ConstMatMap A(tx.data().data(), rows, k);
    ConstMatMap W(tw.data().data(), k, n_out);
    MatMap O(out.data().data(), rows, n_out);
    O.noalias() = A * W;
  }
  carry_seq_lens(out, tx.seq_lens());
  bool ng = any_needs_grad({x, weight});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({x, weight}, {id}, [x, weight, id, rows, k, n_out](const Tape& t, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go) return;
      ConstMatMap G(go->data().data(), rows, n_out);
      if (t.needs_grad(x)) {
        const Tensor& tw = t.value(weight);
        ConstMatMap W(tw.data().data(), k, n_out);
        Tensor gx = Tensor::zeros(t.value(x).shape());
        MatMap GX(gx.data().data(), rows, k);
        GX.noalias() = G * W.transpose();
        g.accumulate(x, std::move(gx));
      }
      if (t.needs_grad(weight)) {
        const Tensor& tx = t.value(x);
        ConstMatMap A(tx.data().data(), rows, k);
        Tensor gw = Tensor::zeros(t.value(weight).shape());
        MatMap GW(gw.data().data(), k, n_out);
        GW.noalias() = A.transpose() * G;
        g.accumulate(weight, std::move(gw));
      }
    });
  }
  return id;
}

NodeId Tape::reduce_sum(NodeId x, Axis axis) {
  const Tensor& tx = value(x);
  if (!tx.has_axis(axis)) {
    throw ShapeError(std::string("reduce_sum: unknown axis ") + axis_name(axis) +
                     " on shape " + shape_to_string(tx.shape()));
  }
  auto split = split_at_axis(tx.shape(), axis);
  Shape out_shape;
  for (const auto& d : tx.shape()) {
    if (d.axis != axis) out_shape.push_back(d);
  }
  Tensor out = Tensor::zeros(out_shape);
  const bool masked = axis == Axis::Time && tx.seq_lens().has_value();
  AxisSplit bsplit = masked ? split_at_axis(tx.shape(), Axis::Batch) : AxisSplit{};
  const auto* lens = masked ? &*tx.seq_lens() : nullptr;
  const auto src = tx.data();
  auto dst = out.data();
  for (std::int64_t o = 0; o < split.outer; ++o) {
    for (std::int64_t a = 0; a < split.extent; ++a) {
      std::int64_t base = (o * split.extent + a) * split.inner;
      for (std::int64_t in = 0; in < split.inner; ++in) {
        std::int64_t flat = base + in;
        if (masked) {
          std::int64_t b = batch_of(flat, bsplit);
          if (a >= (*lens)[static_cast<std::size_t>(b)]) continue;
        }
        dst[static_cast<std::size_t>(o * split.inner + in)] += src[static_cast<std::size_t>(flat)];
      }
    }
  }
  if (axis != Axis::Time) carry_seq_lens(out, tx.seq_lens());
  bool ng = any_needs_grad({x});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({x}, {id}, [x, id, split, axis](const Tape& t, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go || !t.needs_grad(x)) return;
      const Tensor& tx = t.value(x);
      Tensor gx = Tensor::zeros(tx.shape());
      const bool masked = axis == Axis::Time && tx.seq_lens().has_value();
      AxisSplit bsplit = masked ? split_at_axis(tx.shape(), Axis::Batch) : AxisSplit{};
      const auto* lens = masked ? &*tx.seq_lens() : nullptr;
      auto dst = gx.data();
      const auto gg = go->data();
      for (std::int64_t o = 0; o < split.outer; ++o) {
        for (std::int64_t a = 0; a < split.extent; ++a) {
          std::int64_t base = (o * split.extent + a) * split.inner;
          for (std::int64_t in = 0; in < split.inner; ++in) {
            std::int64_t flat = base + in;
            if (masked) {
              std::int64_t b = batch_of(flat, bsplit);
              if (a >= (*lens)[static_cast<std::size_t>(b)]) continue;
            }
            dst[static_cast<std::size_t>(flat)] = gg[static_cast<std::size_t>(o * split.inner + in)];
          }
        }
      }
      g.accumulate(x, std::move(gx));
    });
  }
  return id;
}

NodeId Tape::gather_rows(NodeId table, const IdTensor& ids, const std::string& layer) {
  const Tensor& tt = value(table);
  const Shape& ts = tt.shape();
  if (ts.size() != 2 || ts[0].axis != Axis::Feature || ts[1].axis != Axis::Other) {
    throw ShapeError("gather_rows: table must be [Feature=V, Other=D], got " +
                     shape_to_string(ts));
  }
  std::int64_t v = ts[0].extent, d = ts[1].extent;
  Shape out_shape = ids.shape();
  out_shape.push_back({Axis::Feature, d});
  Tensor out = Tensor::zeros(out_shape);
  const auto idd = ids.data();
  const auto src = tt.data();
  auto dst = out.data();
  std::vector<std::int32_t> saved_ids(idd.begin(), idd.end());
  for (std::int64_t r = 0; r < ids.size(); ++r) {
    std::int32_t iv = idd[static_cast<std::size_t>(r)];
    if (iv < 0 || iv >= v) {
      throw IndexError("id " + std::to_string(iv) + " out of range [0, " +
                       std::to_string(v) + ") in layer '" + layer + "'");
    }
    std::memcpy(dst.data() + r * d, src.data() + static_cast<std::int64_t>(iv) * d,
                static_cast<std::size_t>(d) * sizeof(Real));
  }
  if (ids.seq_lens()) carry_seq_lens(out, ids.seq_lens());
  bool ng = any_needs_grad({table});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({table}, {id},
           [table, id, saved_ids = std::move(saved_ids), d](const Tape& t, GradBuffer& g) {
             const Tensor* go = g.get(id);
             if (!go || !t.needs_grad(table)) return;
             Tensor gt = Tensor::zeros(t.value(table).shape());
             auto dst = gt.data();
             const auto gg = go->data();
             for (std::size_t r = 0; r < saved_ids.size(); ++r) {
               Real* row = dst.data() + static_cast<std::int64_t>(saved_ids[r]) * d;
               const Real* src = gg.data() + static_cast<std::int64_t>(r) * d;
               for (std::int64_t j = 0; j < d; ++j) row[j] += src[j];
             }
             g.accumulate(table, std::move(gt));
           });
  }
  return id;
}

NodeId Tape::gather_feature(NodeId values, const IdTensor& ids, const std::string& layer) {
  const Tensor& tv = value(values);
  const Shape& vs = tv.shape();
  if (vs.empty() || vs.back().axis != Axis::Feature) {
    throw ShapeError("gather_feature: values must end in Feature axis");
  }
  std::int64_t v = vs.back().extent;
  Shape lead(vs.begin(), vs.end() - 1);
  if (lead != ids.shape()) {
    throw ShapeError("gather_feature: id shape " + shape_to_string(ids.shape()) +
                     " does not match leading shape " + shape_to_string(lead));
  }
  Tensor out = Tensor::zeros(lead);
  const auto idd = ids.data();
  const auto src = tv.data();
  auto dst = out.data();
  std::vector<std::int32_t> saved_ids(idd.begin(), idd.end());
  for (std::int64_t r = 0; r < out.size(); ++r) {
    std::int32_t iv = idd[static_cast<std::size_t>(r)];
    if (iv < 0 || iv >= v) {
      throw IndexError("id " + std::to_string(iv) + " out of range [0, " +
                       std::to_string(v) + ") in layer '" + layer + "'");
    }
    dst[static_cast<std::size_t>(r)] = src[static_cast<std::size_t>(r * v + iv)];
  }
  if (ids.seq_lens()) carry_seq_lens(out, ids.seq_lens());
  bool ng = any_needs_grad({values});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({values}, {id},
           [values, id, saved_ids = std::move(saved_ids), v](const Tape& t, GradBuffer& g) {
             const Tensor* go = g.get(id);
             if (!go || !t.needs_grad(values)) return;
             Tensor gv = Tensor::zeros(t.value(values).shape());
             auto dst = gv.data();
             const auto gg = go->data();
             for (std::size_t r = 0; r < saved_ids.size(); ++r) {
               dst[r * static_cast<std::size_t>(v) + static_cast<std::size_t>(saved_ids[r])] +=
                   gg[r];
             }
             g.accumulate(values, std::move(gv));
           });
  }
  return id;
}

NodeId Tape::dropout(NodeId x, Real rate, DropoutKey key, std::int64_t step_tag, bool train) {
  if (rate < Real(0) || rate >= Real(1)) {
    throw std::invalid_argument("dropout rate must be in [0, 1), got " +
                                std::to_string(static_cast<double>(rate)));
  }
  if (!train || rate == Real(0)) return x;
  const Tensor& tx = value(x);
  Tensor out = Tensor::zeros(tx.shape());
  const Real inv_keep = Real(1) / (Real(1) - rate);
  // With a static tag, elements key by their own Time coordinate so that a
  // value computed once per batch and a value recomputed per loop step draw
  // the same mask.
  AxisSplit tsplit = split_at_axis(tx.shape(), Axis::Time);
  const bool by_own_time = step_tag == kStaticStep && tsplit.index >= 0;
  const auto src = tx.data();
  auto dst = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    std::int64_t comp, pos;
    if (step_tag >= 0) {
      comp = step_tag + 2;
      pos = i;
    } else if (by_own_time) {
      std::int64_t t = (i / tsplit.inner) % tsplit.extent;
      comp = t + 2;
      pos = (i / (tsplit.extent * tsplit.inner)) * tsplit.inner + i % tsplit.inner;
    } else {
      comp = 1;
      pos = i;
    }
    dst[static_cast<std::size_t>(i)] = survives_dropout(key, comp, pos, rate)
                                           ? src[static_cast<std::size_t>(i)] * inv_keep
                                           : Real(0);
  }
  carry_seq_lens(out, tx.seq_lens());
  bool ng = any_needs_grad({x});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({x}, {id},
           [x, id, rate, key, step_tag, tsplit, by_own_time, inv_keep](const Tape& t,
                                                                       GradBuffer& g) {
             const Tensor* go = g.get(id);
             if (!go || !t.needs_grad(x)) return;
             Tensor gx = Tensor::zeros(t.value(x).shape());
             auto dst = gx.data();
             const auto gg = go->data();
             for (std::int64_t i = 0; i < gx.size(); ++i) {
               std::int64_t comp, pos;
               if (step_tag >= 0) {
                 comp = step_tag + 2;
                 pos = i;
               } else if (by_own_time) {
                 std::int64_t tt = (i / tsplit.inner) % tsplit.extent;
                 comp = tt + 2;
                 pos = (i / (tsplit.extent * tsplit.inner)) * tsplit.inner + i % tsplit.inner;
               } else {
                 comp = 1;
                 pos = i;
               }
               dst[static_cast<std::size_t>(i)] =
                   survives_dropout(key, comp, pos, rate) ? gg[static_cast<std::size_t>(i)] * inv_keep
                                                          : Real(0);
             }
             g.accumulate(x, std::move(gx));
           });
  }
  return id;
}

NodeId Tape::slice_time(NodeId x, std::int64_t t) {
  const Tensor& tx = value(x);
  auto split = split_at_axis(tx.shape(), Axis::Time);
  if (split.index < 0) throw ShapeError("slice_time: no Time axis");
  if (t < 0 || t >= split.extent) throw IndexError("slice_time: step out of range");
  Shape out_shape;
  for (const auto& d : tx.shape()) {
    if (d.axis != Axis::Time) out_shape.push_back(d);
  }
  Tensor out = Tensor::zeros(out_shape);
  const auto src = tx.data();
  auto dst = out.data();
  for (std::int64_t o = 0; o < split.outer; ++o) {
    std::memcpy(dst.data() + o * split.inner,
                src.data() + (o * split.extent + t) * split.inner,
                static_cast<std::size_t>(split.inner) * sizeof(Real));
  }
  bool ng = any_needs_grad({x});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({x}, {id}, [x, id, t, split](const Tape& tp, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go || !tp.needs_grad(x)) return;
      Tensor gx = Tensor::zeros(tp.value(x).shape());
      auto dst = gx.data();
      const auto gg = go->data();
      for (std::int64_t o = 0; o < split.outer; ++o) {
        std::memcpy(dst.data() + (o * split.extent + t) * split.inner,
                    gg.data() + o * split.inner,
                    static_cast<std::size_t>(split.inner) * sizeof(Real));
      }
      g.accumulate(x, std::move(gx));
    });
  }
  return id;
}

NodeId Tape::stack_time(std::span<const NodeId> steps,
                        std::optional<std::vector<std::int32_t>> seq_lens) {
  if (steps.empty()) throw ShapeError("stack_time: no steps");
  const Shape& s0 = value(steps[0]).shape();
  for (NodeId s : steps) {
    if (value(s).shape() != s0) throw ShapeError("stack_time: step shapes disagree");
  }
  if (split_at_axis(s0, Axis::Time).index >= 0) {
    throw ShapeError("stack_time: steps already carry a Time axis");
  }
  std::int64_t t_extent = static_cast<std::int64_t>(steps.size());
  Shape out_shape;
  // Insert Time at its canonical slot.
  bool inserted = false;
  for (const auto& d : s0) {
    if (!inserted && static_cast<int>(d.axis) > static_cast<int>(Axis::Time)) {
      out_shape.push_back({Axis::Time, t_extent});
      inserted = true;
    }
    out_shape.push_back(d);
  }
  if (!inserted) out_shape.push_back({Axis::Time, t_extent});
  Tensor out = Tensor::zeros(out_shape);
  auto split = split_at_axis(out_shape, Axis::Time);
  auto dst = out.data();
  for (std::int64_t t = 0; t < t_extent; ++t) {
    const auto src = value(steps[static_cast<std::size_t>(t)]).data();
    for (std::int64_t o = 0; o < split.outer; ++o) {
      std::memcpy(dst.data() + (o * split.extent + t) * split.inner,
                  src.data() + o * split.inner,
                  static_cast<std::size_t>(split.inner) * sizeof(Real));
    }
  }
  if (seq_lens) carry_seq_lens(out, seq_lens);
  std::vector<NodeId> inputs(steps.begin(), steps.end());
  bool ng = false;
  for (NodeId s : inputs) {
    if (any_needs_grad({s})) {
      ng = true;
      break;
    }
  }
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record(inputs, {id}, [inputs, id, split](const Tape& tp, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go) return;
      const auto gg = go->data();
      for (std::size_t t = 0; t < inputs.size(); ++t) {
        if (!tp.needs_grad(inputs[t])) continue;
        Tensor gs = Tensor::zeros(tp.value(inputs[t]).shape());
        auto dst = gs.data();
        for (std::int64_t o = 0; o < split.outer; ++o) {
          std::memcpy(dst.data() + o * split.inner,
                      gg.data() + (o * split.extent + static_cast<std::int64_t>(t)) * split.inner,
                      static_cast<std::size_t>(split.inner) * sizeof(Real));
        }
        g.accumulate(inputs[t], std::move(gs));
      }
    });
  }
  return id;
}

NodeId Tape::concat_feature(std::span<const NodeId> parts) {
  if (parts.empty()) throw ShapeError("concat_feature: no inputs");
  if (parts.size() == 1) return parts[0];
  Shape lead;
  std::int64_t total_f = 0;
  std::optional<std::vector<std::int32_t>> lens;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& t = value(parts[i]);
    const Shape& s = t.shape();
    if (s.empty() || s.back().axis != Axis::Feature) {
      throw ShapeError("concat_feature: inputs must end in Feature axis, got " +
                       shape_to_string(s));
    }
    Shape this_lead(s.begin(), s.end() - 1);
    if (i == 0) {
      lead = this_lead;
    } else if (lead != this_lead) {
      throw ShapeError("concat_feature: leading shapes disagree: " + shape_to_string(lead) +
                       " vs " + shape_to_string(this_lead));
    }
    total_f += s.back().extent;
    if (t.seq_lens()) lens = t.seq_lens();
  }
  Shape out_shape = lead;
  out_shape.push_back({Axis::Feature, total_f});
  Tensor out = Tensor::zeros(out_shape);
  std::int64_t rows = shape_size(lead);
  auto dst = out.data();
  std::int64_t offset = 0;
  std::vector<std::int64_t> widths;
  for (NodeId p : parts) {
    const Tensor& t = value(p);
    std::int64_t f = t.shape().back().extent;
    widths.push_back(f);
    const auto src = t.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      std::memcpy(dst.data() + r * total_f + offset, src.data() + r * f,
                  static_cast<std::size_t>(f) * sizeof(Real));
    }
    offset += f;
  }
  carry_seq_lens(out, lens);
  std::vector<NodeId> inputs(parts.begin(), parts.end());
  bool ng = false;
  for (NodeId p : inputs) {
    if (any_needs_grad({p})) {
      ng = true;
      break;
    }
  }
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record(inputs, {id},
           [inputs, id, widths, rows, total_f](const Tape& tp, GradBuffer& g) {
             const Tensor* go = g.get(id);
             if (!go) return;
             const auto gg = go->data();
             std::int64_t offset = 0;
             for (std::size_t i = 0; i < inputs.size(); ++i) {
               std::int64_t f = widths[i];
               if (tp.needs_grad(inputs[i])) {
                 Tensor gp = Tensor::zeros(tp.value(inputs[i]).shape());
                 auto dst = gp.data();
                 for (std::int64_t r = 0; r < rows; ++r) {
                   std::memcpy(dst.data() + r * f, gg.data() + r * total_f + offset,
                               static_cast<std::size_t>(f) * sizeof(Real));
                 }
                 g.accumulate(inputs[i], std::move(gp));
               }
               offset += f;
             }
           });
  }
  return id;
}

NodeId Tape::apply_time_mask(NodeId x) {
  const Tensor& tx = value(x);
  if (!tx.seq_lens()) return x;
  auto tsplit = split_at_axis(tx.shape(), Axis::Time);
  auto bsplit = split_at_axis(tx.shape(), Axis::Batch);
  const std::vector<std::int32_t> lens = *tx.seq_lens();
  Tensor out = Tensor::zeros(tx.shape());
  const auto src = tx.data();
  auto dst = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    std::int64_t t = (i / tsplit.inner) % tsplit.extent;
    std::int64_t b = batch_of(i, bsplit);
    dst[static_cast<std::size_t>(i)] =
        t < lens[static_cast<std::size_t>(b)] ? src[static_cast<std::size_t>(i)] : Real(0);
  }
  carry_seq_lens(out, tx.seq_lens());
  bool ng = any_needs_grad({x});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({x}, {id}, [x, id, tsplit, bsplit, lens](const Tape& tp, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go || !tp.needs_grad(x)) return;
      Tensor gx = Tensor::zeros(tp.value(x).shape());
      auto dst = gx.data();
      const auto gg = go->data();
      for (std::int64_t i = 0; i < gx.size(); ++i) {
        std::int64_t t = (i / tsplit.inner) % tsplit.extent;
        std::int64_t b = batch_of(i, bsplit);
        dst[static_cast<std::size_t>(i)] =
            t < lens[static_cast<std::size_t>(b)] ? gg[static_cast<std::size_t>(i)] : Real(0);
      }
      g.accumulate(x, std::move(gx));
    });
  }
  return id;
}

NodeId Tape::reverse_time_per_seq(NodeId x) {
  const Tensor& tx = value(x);
  auto tsplit = split_at_axis(tx.shape(), Axis::Time);
  auto bsplit = split_at_axis(tx.shape(), Axis::Batch);
  if (tsplit.index < 0 || bsplit.index < 0) {
    throw ShapeError("reverse_time_per_seq: needs Batch and Time axes");
  }
  std::vector<std::int32_t> lens;
  if (tx.seq_lens()) {
    lens = *tx.seq_lens();
  } else {
    lens.assign(static_cast<std::size_t>(bsplit.extent),
                static_cast<std::int32_t>(tsplit.extent));
  }
  Tensor out = Tensor::zeros(tx.shape());
  const auto src = tx.data();
  auto dst = out.data();
  // Canonical order guarantees Batch is outermost and Time precedes the
  // remaining inner axes.
  std::int64_t per_batch = tx.size() / bsplit.extent;
  std::int64_t t_block = tsplit.inner;
  for (std::int64_t b = 0; b < bsplit.extent; ++b) {
    std::int64_t l = lens[static_cast<std::size_t>(b)];
    for (std::int64_t t = 0; t < tsplit.extent; ++t) {
      std::int64_t src_t = t < l ? l - 1 - t : t;
      std::memcpy(dst.data() + b * per_batch + t * t_block,
                  src.data() + b * per_batch + src_t * t_block,
                  static_cast<std::size_t>(t_block) * sizeof(Real));
    }
  }
  carry_seq_lens(out, tx.seq_lens());
  bool ng = any_needs_grad({x});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({x}, {id},
           [x, id, bsplit, tsplit, lens, per_batch, t_block](const Tape& tp, GradBuffer& g) {
             const Tensor* go = g.get(id);
             if (!go || !tp.needs_grad(x)) return;
             Tensor gx = Tensor::zeros(tp.value(x).shape());
             auto dst = gx.data();
             const auto gg = go->data();
             // The reversal is an involutive permutation; its adjoint is itself.
             for (std::int64_t b = 0; b < bsplit.extent; ++b) {
               std::int64_t l = lens[static_cast<std::size_t>(b)];
               for (std::int64_t t = 0; t < tsplit.extent; ++t) {
                 std::int64_t src_t = t < l ? l - 1 - t : t;
                 std::memcpy(dst.data() + b * per_batch + t * t_block,
                             gg.data() + b * per_batch + src_t * t_block,
                             static_cast<std::size_t>(t_block) * sizeof(Real));
               }
             }
             g.accumulate(x, std::move(gx));
           });
  }
  return id;
}

NodeId Tape::log_softmax(NodeId x) {
  const Tensor& tx = value(x);
  const Shape& s = tx.shape();
  if (s.empty() || s.back().axis != Axis::Feature) {
    throw ShapeError("log_softmax: input must end in Feature axis, got " + shape_to_string(s));
  }
  std::int64_t v = s.back().extent;
  std::int64_t rows = tx.size() / v;
  Tensor out = Tensor::zeros(s);
  const auto src = tx.data();
  auto dst = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* in = src.data() + r * v;
    Real* o = dst.data() + r * v;
    Real m = in[0];
    for (std::int64_t j = 1; j < v; ++j) m = std::max(m, in[j]);
    Real sum = Real(0);
    for (std::int64_t j = 0; j < v; ++j) sum += std::exp(in[j] - m);
    Real lse = m + std::log(sum);
    for (std::int64_t j = 0; j < v; ++j) o[j] = in[j] - lse;
  }
  carry_seq_lens(out, tx.seq_lens());
  bool ng = any_needs_grad({x});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({x}, {id}, [x, id, rows, v](const Tape& tp, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go || !tp.needs_grad(x)) return;
      const Tensor& y = tp.value(id);
      Tensor gx = Tensor::zeros(tp.value(x).shape());
      auto dst = gx.data();
      const auto gg = go->data();
      const auto yy = y.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        Real gsum = Real(0);
        for (std::int64_t j = 0; j < v; ++j) gsum += gg[static_cast<std::size_t>(r * v + j)];
        for (std::int64_t j = 0; j < v; ++j) {
          std::size_t i = static_cast<std::size_t>(r * v + j);
          dst[i] = gg[i] - std::exp(yy[i]) * gsum;
        }
      }
      g.accumulate(x, std::move(gx));
    });
  }
  return id;
}

NodeId Tape::softmax_over_spatial(NodeId e) {
  const Tensor& te = value(e);
  auto tsplit = split_at_axis(te.shape(), Axis::Time);
  auto bsplit = split_at_axis(te.shape(), Axis::Batch);
  if (tsplit.index < 0 || bsplit.index < 0) {
    throw ShapeError("softmax_over_spatial: needs Batch and Time axes, got " +
                     shape_to_string(te.shape()));
  }
  std::vector<std::int32_t> lens;
  if (te.seq_lens()) {
    lens = *te.seq_lens();
  } else {
    lens.assign(static_cast<std::size_t>(bsplit.extent),
                static_cast<std::int32_t>(tsplit.extent));
  }
  Tensor out = Tensor::zeros(te.shape());
  const auto src = te.data();
  auto dst = out.data();
  std::int64_t per_batch = te.size() / bsplit.extent;
  std::int64_t t_block = tsplit.inner;
  std::int64_t t_extent = tsplit.extent;
  // Independent softmax per (batch, inner) column across valid Time.
  for (std::int64_t b = 0; b < bsplit.extent; ++b) {
    std::int64_t l = lens[static_cast<std::size_t>(b)];
    for (std::int64_t in = 0; in < t_block; ++in) {
      const Real* col = src.data() + b * per_batch + in;
      Real* o = dst.data() + b * per_batch + in;
      Real m = col[0];
      for (std::int64_t t = 1; t < l; ++t) m = std::max(m, col[t * t_block]);
      Real sum = Real(0);
      for (std::int64_t t = 0; t < l; ++t) sum += std::exp(col[t * t_block] - m);
      for (std::int64_t t = 0; t < t_extent; ++t) {
        o[t * t_block] = t < l ? std::exp(col[t * t_block] - m) / sum : Real(0);
      }
    }
  }
  carry_seq_lens(out, te.seq_lens());
  bool ng = any_needs_grad({e});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({e}, {id},
           [e, id, bsplit, tsplit, lens, per_batch, t_block](const Tape& tp, GradBuffer& g) {
             const Tensor* go = g.get(id);
             if (!go || !tp.needs_grad(e)) return;
             const Tensor& y = tp.value(id);
             Tensor gx = Tensor::zeros(tp.value(e).shape());
             auto dst = gx.data();
             const auto gg = go->data();
             const auto yy = y.data();
             for (std::int64_t b = 0; b < bsplit.extent; ++b) {
               std::int64_t l = lens[static_cast<std::size_t>(b)];
               for (std::int64_t in = 0; in < t_block; ++in) {
                 std::int64_t base = b * per_batch + in;
                 Real dot = Real(0);
                 for (std::int64_t t = 0; t < l; ++t) {
                   std::size_t i = static_cast<std::size_t>(base + t * t_block);
                   dot += gg[i] * yy[i];
                 }
                 for (std::int64_t t = 0; t < l; ++t) {
                   std::size_t i = static_cast<std::size_t>(base + t * t_block);
                   dst[i] = yy[i] * (gg[i] - dot);
                 }
               }
             }
             g.accumulate(e, std::move(gx));
           });
  }
  return id;
}

NodeId Tape::generic_attention(NodeId weights, NodeId base) {
  const Tensor& tw = value(weights);
  const Tensor& tb = value(base);
  auto wt = split_at_axis(tw.shape(), Axis::Time);
  auto bt = split_at_axis(tb.shape(), Axis::Time);
  auto wb = split_at_axis(tw.shape(), Axis::Batch);
  auto bb = split_at_axis(tb.shape(), Axis::Batch);
  if (wt.index < 0 || bt.index < 0 || wb.index < 0 || bb.index < 0 ||
      wt.extent != bt.extent || wb.extent != bb.extent) {
    throw ShapeError("generic_attention: operand shapes disagree: " +
                     shape_to_string(tw.shape()) + " vs " + shape_to_string(tb.shape()));
  }
  if (wt.inner != 1) {
    throw ShapeError("generic_attention: weights must have Feature extent 1, got " +
                     shape_to_string(tw.shape()));
  }
  std::int64_t B = bb.extent, T = bt.extent, D = bt.inner;
  Shape out_shape;
  for (const auto& d : tb.shape()) {
    if (d.axis != Axis::Time) out_shape.push_back(d);
  }
  Tensor out = Tensor::zeros(out_shape);
  const auto aw = tw.data();
  const auto ab = tb.data();
  auto dst = out.data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < T; ++t) {
      Real w = aw[static_cast<std::size_t>(b * T + t)];
      if (w == Real(0)) continue;
      const Real* row = ab.data() + (b * T + t) * D;
      Real* o = dst.data() + b * D;
      for (std::int64_t d = 0; d < D; ++d) o[d] += w * row[d];
    }
  }
  bool ng = any_needs_grad({weights, base});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({weights, base}, {id}, [weights, base, id, B, T, D](const Tape& tp, GradBuffer& g) {
      const Tensor* go = g.get(id);
      if (!go) return;
      const auto gg = go->data();
      if (tp.needs_grad(weights)) {
        const Tensor& tb = tp.value(base);
        const auto ab = tb.data();
        Tensor gw = Tensor::zeros(tp.value(weights).shape());
        auto dst = gw.data();
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t t = 0; t < T; ++t) {
            const Real* row = ab.data() + (b * T + t) * D;
            const Real* gr = gg.data() + b * D;
            Real acc = Real(0);
            for (std::int64_t d = 0; d < D; ++d) acc += gr[d] * row[d];
            dst[static_cast<std::size_t>(b * T + t)] = acc;
          }
        }
        g.accumulate(weights, std::move(gw));
      }
      if (tp.needs_grad(base)) {
        const Tensor& tw = tp.value(weights);
        const auto aw = tw.data();
        Tensor gb = Tensor::zeros(tp.value(base).shape());
        auto dst = gb.data();
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t t = 0; t < T; ++t) {
            Real w = aw[static_cast<std::size_t>(b * T + t)];
            if (w == Real(0)) continue;
            Real* row = dst.data() + (b * T + t) * D;
            const Real* gr = gg.data() + b * D;
            for (std::int64_t d = 0; d < D; ++d) row[d] = w * gr[d];
          }
        }
        g.accumulate(base, std::move(gb));
      }
    });
  }
  return id;
}

Tape::LstmOut Tape::lstm_step(NodeId W, NodeId R, NodeId b, NodeId x, NodeId h_prev,
                              NodeId c_prev) {
  const Tensor& tx = value(x);
  const Tensor& th = value(h_prev);
  const Tensor& tc = value(c_prev);
  const Tensor& tW = value(W);
  const Tensor& tR = value(R);
  const Tensor& tb = value(b);
  if (tx.shape().empty() || tx.shape().back().axis != Axis::Feature) {
    throw ShapeError("lstm_step: x must end in Feature axis");
  }
  std::int64_t dx = tx.shape().back().extent;
  std::int64_t B = tx.size() / dx;
  if (tR.shape().size() != 2) throw ShapeError("lstm_step: R must be rank 2");
  std::int64_t H = tR.shape()[0].extent;
  if (tW.shape().size() != 2 || tW.shape()[0].extent != dx || tW.shape()[1].extent != 4 * H ||
      tR.shape()[1].extent != 4 * H || tb.size() != 4 * H || th.size() != B * H ||
      tc.size() != B * H) {
    throw ShapeError("lstm_step: inconsistent shapes: x=" + shape_to_string(tx.shape()) +
                     " W=" + shape_to_string(tW.shape()) + " R=" + shape_to_string(tR.shape()));
  }
  // Z = x W + h R + b, gates in (i, f, g, o) block order.
  std::vector<Real> z(static_cast<std::size_t>(B * 4 * H));
  {
    ConstMatMap X(tx.data().data(), B, dx);
    ConstMatMap Hm(th.data().data(), B, H);
    ConstMatMap Wm(tW.data().data(), dx, 4 * H);
    ConstMatMap Rm(tR.data().data(), H, 4 * H);
    MatMap Z(z.data(), B, 4 * H);
    Z.noalias() = X * Wm;
    Z.noalias() += Hm * Rm;
    const auto bias = tb.data();
    for (std::int64_t r = 0; r < B; ++r) {
      Real* row = z.data() + r * 4 * H;
      for (std::int64_t j = 0; j < 4 * H; ++j) row[j] += bias[static_cast<std::size_t>(j)];
    }
  }
  // Saved activations for backward.
  auto saved = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(B * 5 * H));
  Tensor h_out = Tensor::zeros(th.shape());
  Tensor c_out = Tensor::zeros(tc.shape());
  {
    const auto cp = tc.data();
    auto ho = h_out.data();
    auto co = c_out.data();
    for (std::int64_t r = 0; r < B; ++r) {
      const Real* zr = z.data() + r * 4 * H;
      Real* sv = saved->data() + r * 5 * H;
      for (std::int64_t j = 0; j < H; ++j) {
        Real gi = Real(1) / (Real(1) + std::exp(-zr[j]));
        Real gf = Real(1) / (Real(1) + std::exp(-zr[H + j]));
        Real gg = std::tanh(zr[2 * H + j]);
        Real go = Real(1) / (Real(1) + std::exp(-zr[3 * H + j]));
        Real c_new = gf * cp[static_cast<std::size_t>(r * H + j)] + gi * gg;
        Real tc_new = std::tanh(c_new);
        sv[j] = gi;
        sv[H + j] = gf;
        sv[2 * H + j] = gg;
        sv[3 * H + j] = go;
        sv[4 * H + j] = tc_new;
        co[static_cast<std::size_t>(r * H + j)] = c_new;
        ho[static_cast<std::size_t>(r * H + j)] = go * tc_new;
      }
    }
  }
  bool ng = any_needs_grad({W, R, b, x, h_prev, c_prev});
  NodeId hid = emit(std::move(h_out), ng);
  NodeId cid = emit(std::move(c_out), ng);
  if (ng) {
    record({W, R, b, x, h_prev, c_prev}, {hid, cid},
           [=](const Tape& tp, GradBuffer& g) {
             const Tensor* gh = g.get(hid);
             const Tensor* gc = g.get(cid);
             if (!gh && !gc) return;
             std::vector<Real> dz(static_cast<std::size_t>(B * 4 * H));
             Tensor gc_prev = Tensor::zeros(tp.value(c_prev).shape());
             const auto cp = tp.value(c_prev).data();
             auto gcp = gc_prev.data();
             for (std::int64_t r = 0; r < B; ++r) {
               const Real* sv = saved->data() + r * 5 * H;
               Real* dzr = dz.data() + r * 4 * H;
               for (std::int64_t j = 0; j < H; ++j) {
                 std::size_t idx = static_cast<std::size_t>(r * H + j);
                 Real ghv = gh ? gh->data()[idx] : Real(0);
                 Real gcv = gc ? gc->data()[idx] : Real(0);
                 Real gi = sv[j], gf = sv[H + j], gg = sv[2 * H + j], go = sv[3 * H + j];
                 Real tc_new = sv[4 * H + j];
                 Real d_o = ghv * tc_new;
                 Real d_cnew = gcv + ghv * go * (Real(1) - tc_new * tc_new);
                 Real d_f = d_cnew * cp[idx];
                 Real d_i = d_cnew * gg;
                 Real d_g = d_cnew * gi;
                 gcp[idx] = d_cnew * gf;
                 dzr[j] = d_i * gi * (Real(1) - gi);
                 dzr[H + j] = d_f * gf * (Real(1) - gf);
                 dzr[2 * H + j] = d_g * (Real(1) - gg * gg);
                 dzr[3 * H + j] = d_o * go * (Real(1) - go);
               }
             }
             ConstMatMap DZ(dz.data(), B, 4 * H);
             if (tp.needs_grad(x)) {
               const Tensor& tW = tp.value(W);
               ConstMatMap Wm(tW.data().data(), dx, 4 * H);
               Tensor gx = Tensor::zeros(tp.value(x).shape());
               MatMap GX(gx.data().data(), B, dx);
               GX.noalias() = DZ * Wm.transpose();
               g.accumulate(x, std::move(gx));
             }
             if (tp.needs_grad(h_prev)) {
               const Tensor& tR = tp.value(R);
               ConstMatMap Rm(tR.data().data(), H, 4 * H);
               Tensor ghp = Tensor::zeros(tp.value(h_prev).shape());
               MatMap GH(ghp.data().data(), B, H);
               GH.noalias() = DZ * Rm.transpose();
               g.accumulate(h_prev, std::move(ghp));
             }
             if (tp.needs_grad(W)) {
               const Tensor& tx2 = tp.value(x);
               ConstMatMap X(tx2.data().data(), B, dx);
               Tensor gw = Tensor::zeros(tp.value(W).shape());
               MatMap GW(gw.data().data(), dx, 4 * H);
               GW.noalias() = X.transpose() * DZ;
               g.accumulate(W, std::move(gw));
             }
             if (tp.needs_grad(R)) {
               const Tensor& th2 = tp.value(h_prev);
               ConstMatMap Hm(th2.data().data(), B, H);
               Tensor gr = Tensor::zeros(tp.value(R).shape());
               MatMap GR(gr.data().data(), H, 4 * H);
               GR.noalias() = Hm.transpose() * DZ;
               g.accumulate(R, std::move(gr));
             }
             if (tp.needs_grad(b)) {
               Tensor gb = Tensor::zeros(tp.value(b).shape());
               auto d = gb.data();
               for (std::int64_t r = 0; r < B; ++r) {
                 for (std::int64_t j = 0; j < 4 * H; ++j) {
                   d[static_cast<std::size_t>(j)] += dz[static_cast<std::size_t>(r * 4 * H + j)];
                 }
               }
               g.accumulate(b, std::move(gb));
             }
             if (tp.needs_grad(c_prev)) {
               g.accumulate(c_prev, std::move(gc_prev));
             }
           });
  }
  return {hid, cid};
}

NodeId Tape::ce_label_smoothing(NodeId log_probs, const IdTensor& targets, Real epsilon,
                                const std::string& layer) {
  if (epsilon < Real(0) || epsilon >= Real(1)) {
    throw std::invalid_argument("label smoothing epsilon must be in [0, 1)");
  }
  const Tensor& lp = value(log_probs);
  const Shape& s = lp.shape();
  if (s.empty() || s.back().axis != Axis::Feature) {
    throw ShapeError("ce_label_smoothing: log_probs must end in Feature axis");
  }
  std::int64_t v = s.back().extent;
  Shape lead(s.begin(), s.end() - 1);
  if (lead != targets.shape()) {
    throw ShapeError("ce_label_smoothing: target shape " + shape_to_string(targets.shape()) +
                     " does not match " + shape_to_string(lead));
  }
  std::int64_t rows = lp.size() / v;
  auto tsplit = split_at_axis(targets.shape(), Axis::Time);
  auto bsplit = split_at_axis(targets.shape(), Axis::Batch);
  const bool masked = targets.seq_lens().has_value() && tsplit.index >= 0;
  std::vector<std::int32_t> lens;
  if (masked) lens = *targets.seq_lens();
  const auto ids = targets.data();
  const auto src = lp.data();
  double acc = 0.0;
  std::int64_t n_valid = 0;
  std::vector<std::int32_t> saved_ids(ids.begin(), ids.end());
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(rows), 1);
  for (std::int64_t r = 0; r < rows; ++r) {
    if (masked) {
      std::int64_t t = (r / tsplit.inner) % tsplit.extent;
      std::int64_t b = batch_of(r, bsplit);
      if (t >= lens[static_cast<std::size_t>(b)]) {
        valid[static_cast<std::size_t>(r)] = 0;
        continue;
      }
    }
    std::int32_t y = ids[static_cast<std::size_t>(r)];
    if (y < 0 || y >= v) {
      throw IndexError("target id " + std::to_string(y) + " out of range [0, " +
                       std::to_string(v) + ") in layer '" + layer + "'");
    }
    const Real* row = src.data() + r * v;
    double row_sum = 0.0;
    for (std::int64_t j = 0; j < v; ++j) row_sum += static_cast<double>(row[j]);
    acc += -(1.0 - static_cast<double>(epsilon)) * static_cast<double>(row[y]) -
           static_cast<double>(epsilon) / static_cast<double>(v) * row_sum;
    ++n_valid;
  }
  if (n_valid == 0) throw ShapeError("ce_label_smoothing: no valid target positions");
  Tensor out = Tensor::scalar(static_cast<Real>(acc / static_cast<double>(n_valid)));
  bool ng = any_needs_grad({log_probs});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({log_probs}, {id},
           [log_probs, id, saved_ids = std::move(saved_ids), valid = std::move(valid), v,
            epsilon, n_valid, rows](const Tape& tp, GradBuffer& g) {
             const Tensor* go = g.get(id);
             if (!go || !tp.needs_grad(log_probs)) return;
             Real gs = go->scalar_value();
             Tensor gx = Tensor::zeros(tp.value(log_probs).shape());
             auto dst = gx.data();
             Real base = -gs * epsilon / static_cast<Real>(v) / static_cast<Real>(n_valid);
             Real peak = -gs * (Real(1) - epsilon) / static_cast<Real>(n_valid);
             for (std::int64_t r = 0; r < rows; ++r) {
               if (!valid[static_cast<std::size_t>(r)]) continue;
               Real* row = dst.data() + r * v;
               for (std::int64_t j = 0; j < v; ++j) row[j] = base;
               row[saved_ids[static_cast<std::size_t>(r)]] += peak;
             }
             g.accumulate(log_probs, std::move(gx));
           });
  }
  return id;
}

NodeId Tape::risk_loss(NodeId scores, const std::vector<double>& quality,
                       const std::vector<std::int32_t>& group, std::int32_t n_groups) {
  const Tensor& ts = value(scores);
  std::int64_t n = ts.size();
  if (static_cast<std::int64_t>(quality.size()) != n ||
      static_cast<std::int64_t>(group.size()) != n) {
    throw ShapeError("risk_loss: quality/group sizes do not match scores");
  }
  if (n_groups <= 0) throw ShapeError("risk_loss: no groups");
  for (Real v : ts.data()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw std::runtime_error("risk_loss: non-finite hypothesis score");
    }
  }
  // Softmax over each group's scores, risk = -sum p*q, averaged over groups.
  std::vector<double> gmax(static_cast<std::size_t>(n_groups),
                           -std::numeric_limits<double>::infinity());
  const auto sd = ts.data();
  for (std::int64_t i = 0; i < n; ++i) {
    auto gi = static_cast<std::size_t>(group[static_cast<std::size_t>(i)]);
    gmax[gi] = std::max(gmax[gi], static_cast<double>(sd[static_cast<std::size_t>(i)]));
  }
  std::vector<double> gsum(static_cast<std::size_t>(n_groups), 0.0);
  std::vector<double> p(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    auto gi = static_cast<std::size_t>(group[static_cast<std::size_t>(i)]);
    p[static_cast<std::size_t>(i)] =
        std::exp(static_cast<double>(sd[static_cast<std::size_t>(i)]) - gmax[gi]);
    gsum[gi] += p[static_cast<std::size_t>(i)];
  }
  std::vector<double> expected(static_cast<std::size_t>(n_groups), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    auto gi = static_cast<std::size_t>(group[static_cast<std::size_t>(i)]);
    p[static_cast<std::size_t>(i)] /= gsum[gi];
    expected[gi] += p[static_cast<std::size_t>(i)] * quality[static_cast<std::size_t>(i)];
  }
  double loss = 0.0;
  for (double e : expected) loss -= e;
  loss /= static_cast<double>(n_groups);
  Tensor out = Tensor::scalar(static_cast<Real>(loss));
  bool ng = any_needs_grad({scores});
  NodeId id = emit(std::move(out), ng);
  if (ng) {
    record({scores}, {id},
           [scores, id, p = std::move(p), expected = std::move(expected), quality, group,
            n_groups, n](const Tape& tp, GradBuffer& g) {
             const Tensor* go = g.get(id);
             if (!go || !tp.needs_grad(scores)) return;
             Real gs = go->scalar_value();
             Tensor gx = Tensor::zeros(tp.value(scores).shape());
             auto dst = gx.data();
             for (std::int64_t i = 0; i < n; ++i) {
               auto ii = static_cast<std::size_t>(i);
               auto gi = static_cast<std::size_t>(group[ii]);
               double d = -p[ii] * (quality[ii] - expected[gi]) / static_cast<double>(n_groups);
               dst[ii] = gs * static_cast<Real>(d);
             }
             g.accumulate(scores, std::move(gx));
           });
  }
  return id;
}

GradBuffer Tape::backward(NodeId loss) const {
  const Tensor& lv = value(loss);
  if (!lv.is_scalar()) {
    throw ShapeError("backward: loss must be scalar, got " + shape_to_string(lv.shape()));
  }
  GradBuffer g(nodes_.size());
  g.accumulate(loss, Tensor::scalar(Real(1)));
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    bool live = false;
    for (NodeId out : it->outputs) {
      if (g.has(out)) {
        live = true;
        break;
      }
    }
    if (live) it->backward(*this, g);
  }
  return g;
}

std::map<std::string, Tensor> Tape::param_gradients(const GradBuffer& g) const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : params_) {
    out.emplace(name, g.get_or_zeros(id, value(id).shape()));
  }
  return out;
}

std::optional<std::pair<NodeId, std::string>> Tape::find_non_finite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].value.all_finite()) {
      return std::make_pair(static_cast<NodeId>(i), nodes_[i].tag);
    }
  }
  return std::nullopt;
}

}  // namespace seqloom
