#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dpnas/compile.hpp"
#include "dpnas/nsc.hpp"
#include "dpnas/ops.hpp"
#include "dpnas/rng.hpp"
#include "dpnas/tensor.hpp"

namespace dpnas {

// Forward intermediates one backward pass needs. `values` holds every node
// output (slot 0 = input); `pre` holds the tensor feeding a node's inner
// convolution (pre-PReLU map for Conv, unshuffled input for Down, repaired
// input for terminals); `repair_inputs` holds the input of each repair step.
template <typename T>
struct BlockCache {
  std::map<int, Tensor<T>> values;
  std::map<int, Tensor<T>> pre;
  std::map<std::pair<int, int>, std::vector<Tensor<T>>> repair_inputs;
};

// Executable block: parameters bound to plan nodes and repair steps. Every
// parameter is initialized from a stream derived from (seed, layer, slot,
// step), so a layer keeps its exact initial weights whether or not unrelated
// layers exist. Pruned and unpruned builds of the same codes therefore start
// and stay bit-identical.
template <typename T>
class BlockNet {
 public:
  BlockNet() = default;

  BlockNet(const BlockGraph& g, const ShapePlan& plan, std::uint64_t seed)
      : graph_(g), plan_(plan) {
    for (int l : plan_.order) {
      const NscCode& c = graph_.code(l);
      switch (c.op) {
        case OpType::kConvolution: {
          const int ci = plan_.shape_of(c.pred1).c;
          const int co = plan_.base_width;
          add_conv(node_key(l), "l" + std::to_string(l), co, ci, c.kernel,
                   seed, l, 0, 0);
          auto& a = params_[node_key(l)].prelu;
          a = Param<T>::zeros("l" + std::to_string(l) + ".a", {co});
          a.fill_value(T(0.25));
          break;
        }
        case OpType::kDownsampling: {
          const int ch = plan_.shape_of(c.pred1).c;
          add_conv(node_key(l), "l" + std::to_string(l), ch, 4 * ch, 1, seed,
                   l, 0, 0);
          break;
        }
        case OpType::kUpsampling: {
          const int ch = plan_.shape_of(c.pred1).c;
          add_conv(node_key(l), "l" + std::to_string(l), 4 * ch, ch, 1, seed,
                   l, 0, 0);
          break;
        }
        case OpType::kTerminal1:
        case OpType::kTerminal2: {
          const int ci = plan_.shape_of(l - 1).c;
          add_conv(node_key(l), "l" + std::to_string(l),
                   plan_.image_channels, ci, 3, seed, l, 0, 0);
          break;
        }
        default:
          break;
      }
    }
    for (const auto& r : plan_.repairs) {
      for (std::size_t si = 0; si < r.steps.size(); ++si) {
        const RepairStep& st = r.steps[si];
        if (st.kind != RepairStep::Kind::kChannelConv) continue;
        const std::string nm = "l" + std::to_string(r.layer) + ".r" +
                               std::to_string(r.slot) + ".s" +
                               std::to_string(si);
        add_conv(repair_key(r.layer, r.slot, si), nm, st.c_out, st.c_in, 1,
                 seed, r.layer, r.slot + 1, static_cast<int>(si));
      }
    }
  }

  const BlockGraph& graph() const { return graph_; }
  const ShapePlan& plan() const { return plan_; }

  // Parameters in a deterministic order (node params by layer, then repair
  // params by (layer, slot, step); weight, bias, slope within a unit).
  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& [key, unit] : params_) {
      out.push_back(&unit.w);
      out.push_back(&unit.b);
      if (!unit.prelu.value.empty()) out.push_back(&unit.prelu);
    }
    return out;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (auto* p : params()) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  Tensor<T> forward(const Tensor<T>& x, BlockCache<T>* cache) {
    BlockCache<T> local;
    BlockCache<T>& c = cache ? *cache : local;
    c.values.clear();
    c.pre.clear();
    c.repair_inputs.clear();
    c.values[0] = x;
    for (int l : plan_.order) {
      const NscCode& code = graph_.code(l);
      switch (code.op) {
        case OpType::kConvolution: {
          auto& unit = params_.at(node_key(l));
          Tensor<T> pre;
          conv2d_forward(c.values.at(code.pred1), unit.w, unit.b, pre);
          Tensor<T> out;
          prelu_forward(pre, unit.prelu, out);
          c.pre[l] = std::move(pre);
          c.values[l] = std::move(out);
          break;
        }
        case OpType::kDownsampling: {
          auto& unit = params_.at(node_key(l));
          Tensor<T> u = pixel_unshuffle(c.values.at(code.pred1), 2);
          Tensor<T> out;
          conv2d_forward(u, unit.w, unit.b, out);
          c.pre[l] = std::move(u);
          c.values[l] = std::move(out);
          break;
        }
        case OpType::kUpsampling: {
          auto& unit = params_.at(node_key(l));
          Tensor<T> t;
          conv2d_forward(c.values.at(code.pred1), unit.w, unit.b, t);
          c.values[l] = pixel_shuffle(t, 2);
          break;
        }
        case OpType::kIdentity:
          c.values[l] = c.values.at(code.pred1);
          break;
        case OpType::kElementalAdd: {
          Tensor<T> rhs = apply_repair(l, 1, c.values.at(code.pred2), c);
          c.values[l] = add_tensors(c.values.at(code.pred1), rhs);
          break;
        }
        case OpType::kConcat: {
          Tensor<T> rhs = apply_repair(l, 1, c.values.at(code.pred2), c);
          c.values[l] = concat_channels(c.values.at(code.pred1), rhs);
          break;
        }
        case OpType::kTerminal1:
        case OpType::kTerminal2: {
          auto& unit = params_.at(node_key(l));
          Tensor<T> r = apply_repair(l, 0, c.values.at(l - 1), c);
          Tensor<T> out;
          conv2d_forward(r, unit.w, unit.b, out);
          if (code.op == OpType::kTerminal2)
            out = add_tensors(out, c.values.at(0));
          c.pre[l] = std::move(r);
          c.values[l] = std::move(out);
          break;
        }
      }
    }
    return c.values.at(plan_.order.back());
  }

  Tensor<T> forward(const Tensor<T>& x) { return forward(x, nullptr); }

  // Accumulates parameter gradients; returns the gradient w.r.t. the input.
  Tensor<T> backward(const BlockCache<T>& cache, const Tensor<T>& dout) {
    std::map<int, Tensor<T>> g;
    auto accum = [&](int slot, const Tensor<T>& d) {
      auto it = g.find(slot);
      if (it == g.end()) {
        g[slot] = d;
      } else {
        for (std::size_t i = 0; i < d.data.size(); ++i)
          it->second.data[i] += d.data[i];
      }
    };
    g[plan_.order.back()] = dout;
    for (auto it = plan_.order.rbegin(); it != plan_.order.rend(); ++it) {
      const int l = *it;
      const NscCode& code = graph_.code(l);
      auto gi = g.find(l);
      if (gi == g.end()) continue;
      const Tensor<T> d = std::move(gi->second);
      g.erase(gi);
      switch (code.op) {
        case OpType::kConvolution: {
          auto& unit = params_.at(node_key(l));
          Tensor<T> dpre;
          prelu_backward(cache.pre.at(l), unit.prelu, d, dpre);
          Tensor<T> dx;
          conv2d_backward(cache.values.at(code.pred1), unit.w, unit.b, dpre,
                          &dx);
          accum(code.pred1, dx);
          break;
        }
        case OpType::kDownsampling: {
          auto& unit = params_.at(node_key(l));
          Tensor<T> du;
          conv2d_backward(cache.pre.at(l), unit.w, unit.b, d, &du);
          accum(code.pred1, pixel_shuffle(du, 2));
          break;
        }
        case OpType::kUpsampling: {
          auto& unit = params_.at(node_key(l));
          Tensor<T> dt = pixel_unshuffle(d, 2);
          Tensor<T> dx;
          conv2d_backward(cache.values.at(code.pred1), unit.w, unit.b, dt,
                          &dx);
          accum(code.pred1, dx);
          break;
        }
        case OpType::kIdentity:
          accum(code.pred1, d);
          break;
        case OpType::kElementalAdd: {
          accum(code.pred1, d);
          accum(code.pred2, repair_backward(l, 1, d, cache));
          break;
        }
        case OpType::kConcat: {
          const int c1 = plan_.shape_of(code.pred1).c;
          accum(code.pred1, slice_channels(d, 0, c1));
          accum(code.pred2,
                repair_backward(l, 1, slice_channels(d, c1, d.c), cache));
          break;
        }
        case OpType::kTerminal1:
        case OpType::kTerminal2: {
          auto& unit = params_.at(node_key(l));
          Tensor<T> dr;
          conv2d_backward(cache.pre.at(l), unit.w, unit.b, d, &dr);
          accum(l - 1, repair_backward(l, 0, dr, cache));
          if (code.op == OpType::kTerminal2) accum(0, d);
          break;
        }
      }
    }
    auto it = g.find(0);
    if (it == g.end()) {
      const Tensor<T>& x = cache.values.at(0);
      return Tensor<T>(x.c, x.h, x.w);
    }
    return std::move(it->second);
  }

  // Stable enumeration of parameter units for serialization.
  std::vector<std::pair<std::string, Param<T>*>> named_params() {
    std::vector<std::pair<std::string, Param<T>*>> out;
    for (auto& [key, unit] : params_) {
      out.emplace_back(unit.w.name, &unit.w);
      out.emplace_back(unit.b.name, &unit.b);
      if (!unit.prelu.value.empty()) out.emplace_back(unit.prelu.name, &unit.prelu);
    }
    return out;
  }

 private:
  struct ConvUnit {
    Param<T> w;
    Param<T> b;
    Param<T> prelu;  // empty when the unit has no activation
  };

  // map key: (layer, slot+1, step) with slot -1 encoding the node itself
  using Key = std::tuple<int, int, int>;
  static Key node_key(int layer) { return {layer, 0, 0}; }
  static Key repair_key(int layer, int slot, std::size_t step) {
    return {layer, slot + 1, static_cast<int>(step)};
  }

  void add_conv(const Key& key, const std::string& nm, int co, int ci, int k,
                std::uint64_t seed, int l, int slot, int step) {
    ConvUnit unit;
    unit.w = Param<T>::zeros(nm + ".w", {co, ci, k, k});
    unit.b = Param<T>::zeros(nm + ".b", {co});
    RngStream rng(derive_seed(seed, {static_cast<std::uint64_t>(l),
                                     static_cast<std::uint64_t>(slot),
                                     static_cast<std::uint64_t>(step)}));
    kaiming_init(unit.w, static_cast<std::int64_t>(ci) * k * k, rng);
    params_[key] = std::move(unit);
  }

  Tensor<T> apply_repair(int layer, int slot, Tensor<T> t,
                         BlockCache<T>& cache) {
    const Repair* r = plan_.repair_for(layer, slot);
    if (!r) return t;
    auto& inputs = cache.repair_inputs[{layer, slot}];
    inputs.clear();
    for (std::size_t si = 0; si < r->steps.size(); ++si) {
      inputs.push_back(t);
      t = step_forward(layer, slot, si, r->steps[si], t);
    }
    return t;
  }

  Tensor<T> step_forward(int layer, int slot, std::size_t si,
                         const RepairStep& st, const Tensor<T>& t) {
    switch (st.kind) {
      case RepairStep::Kind::kChannelConv: {
        auto& unit = params_.at(repair_key(layer, slot, si));
        Tensor<T> out;
        conv2d_forward(t, unit.w, unit.b, out);
        return out;
      }
      case RepairStep::Kind::kShuffleUp:
        return pixel_shuffle(t, st.factor);
      case RepairStep::Kind::kShuffleDown:
        return pixel_unshuffle(t, st.factor);
      case RepairStep::Kind::kPadCropSpatial:
        return pad_crop_spatial(t, st.to_h, st.to_w);
      case RepairStep::Kind::kPadTruncChannel:
        return pad_trunc_channels(t, st.to_c);
    }
    return t;
  }

  Tensor<T> repair_backward(int layer, int slot, Tensor<T> d,
                            const BlockCache<T>& cache) {
    const Repair* r = plan_.repair_for(layer, slot);
    if (!r) return d;
    const auto& inputs = cache.repair_inputs.at({layer, slot});
    for (std::size_t i = r->steps.size(); i-- > 0;) {
      const RepairStep& st = r->steps[i];
      switch (st.kind) {
        case RepairStep::Kind::kChannelConv: {
          auto& unit = params_.at(repair_key(layer, slot, i));
          Tensor<T> dx;
          conv2d_backward(inputs[i], unit.w, unit.b, d, &dx);
          d = std::move(dx);
          break;
        }
        case RepairStep::Kind::kShuffleUp:
          d = pixel_unshuffle(d, st.factor);
          break;
        case RepairStep::Kind::kShuffleDown:
          d = pixel_shuffle(d, st.factor);
          break;
        case RepairStep::Kind::kPadCropSpatial: {
          const Tensor<T>& src = inputs[i];
          d = pad_crop_backward(d, src.h, src.w);
          break;
        }
        case RepairStep::Kind::kPadTruncChannel: {
          const Tensor<T>& src = inputs[i];
          d = pad_trunc_backward(d, src.c);
          break;
        }
      }
    }
    return d;
  }

  // Center crop / symmetric zero-pad, each axis handled independently.
  static Tensor<T> pad_crop_spatial(const Tensor<T>& x, int th, int tw) {
    Tensor<T> y(x.c, th, tw);
    const int ch = std::min(x.h, th), cw = std::min(x.w, tw);
    const int sy = x.h > th ? (x.h - th) / 2 : 0;
    const int sx = x.w > tw ? (x.w - tw) / 2 : 0;
    const int dy = th > x.h ? (th - x.h) / 2 : 0;
    const int dx = tw > x.w ? (tw - x.w) / 2 : 0;
    for (int c = 0; c < x.c; ++c)
      for (int h = 0; h < ch; ++h)
        for (int w = 0; w < cw; ++w)
          y.at(c, dy + h, dx + w) = x.at(c, sy + h, sx + w);
    return y;
  }

  static Tensor<T> pad_crop_backward(const Tensor<T>& dy, int fh, int fw) {
    Tensor<T> dx(dy.c, fh, fw);
    const int ch = std::min(fh, dy.h), cw = std::min(fw, dy.w);
    const int sy = fh > dy.h ? (fh - dy.h) / 2 : 0;
    const int sx = fw > dy.w ? (fw - dy.w) / 2 : 0;
    const int dyo = dy.h > fh ? (dy.h - fh) / 2 : 0;
    const int dxo = dy.w > fw ? (dy.w - fw) / 2 : 0;
    for (int c = 0; c < dy.c; ++c)
      for (int h = 0; h < ch; ++h)
        for (int w = 0; w < cw; ++w)
          dx.at(c, sy + h, sx + w) = dy.at(c, dyo + h, dxo + w);
    return dx;
  }

  static Tensor<T> pad_trunc_channels(const Tensor<T>& x, int tc) {
    Tensor<T> y(tc, x.h, x.w);
    const int cc = std::min(x.c, tc);
    std::copy(x.data.begin(),
              x.data.begin() + static_cast<std::size_t>(cc) * x.h * x.w,
              y.data.begin());
    return y;
  }

  static Tensor<T> pad_trunc_backward(const Tensor<T>& dy, int fc) {
    Tensor<T> dx(fc, dy.h, dy.w);
    const int cc = std::min(fc, dy.c);
    std::copy(dy.data.begin(),
              dy.data.begin() + static_cast<std::size_t>(cc) * dy.h * dy.w,
              dx.data.begin());
    return dx;
  }

  BlockGraph graph_;
  ShapePlan plan_;
  std::map<Key, ConvUnit> params_;
};

}  // namespace dpnas
