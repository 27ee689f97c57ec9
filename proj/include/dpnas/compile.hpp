#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpnas/errors.hpp"
#include "dpnas/nsc.hpp"

namespace dpnas {

struct Shape {
  int c = 0, h = 0, w = 0;
  friend bool operator==(const Shape&, const Shape&) = default;
  std::string str() const {
    return "(" + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

enum class DmmMode { kFull, kOff, kZeroPad };

inline const char* dmm_mode_name(DmmMode m) {
  switch (m) {
    case DmmMode::kFull: return "full";
    case DmmMode::kOff: return "off";
    case DmmMode::kZeroPad: return "zero_pad";
  }
  return "?";
}

inline DmmMode dmm_mode_from_name(const std::string& s) {
  if (s == "full") return DmmMode::kFull;
  if (s == "off") return DmmMode::kOff;
  if (s == "zero_pad") return DmmMode::kZeroPad;
  throw ParseError("unknown dmm_mode '" + s + "'");
}

// One primitive inside a repair. ShuffleUp/ShuffleDown move information
// between channels and space losslessly; ChannelConv is a trainable 1x1
// convolution; the Pad* variants are the non-trainable ablation primitives.
struct RepairStep {
  enum class Kind { kChannelConv, kShuffleUp, kShuffleDown, kPadCropSpatial, kPadTruncChannel };
  Kind kind;
  int factor = 0;   // shuffle scale
  int c_in = 0;     // channel conv
  int c_out = 0;
  int to_h = 0;     // pad/crop target
  int to_w = 0;
  int to_c = 0;
  friend bool operator==(const RepairStep&, const RepairStep&) = default;
};

inline RepairStep channel_conv_step(int c_in, int c_out) {
  RepairStep s{RepairStep::Kind::kChannelConv};
  s.c_in = c_in;
  s.c_out = c_out;
  return s;
}
inline RepairStep shuffle_up_step(int factor) {
  RepairStep s{RepairStep::Kind::kShuffleUp};
  s.factor = factor;
  return s;
}
inline RepairStep shuffle_down_step(int factor) {
  RepairStep s{RepairStep::Kind::kShuffleDown};
  s.factor = factor;
  return s;
}
inline RepairStep pad_crop_step(int to_h, int to_w) {
  RepairStep s{RepairStep::Kind::kPadCropSpatial};
  s.to_h = to_h;
  s.to_w = to_w;
  return s;
}
inline RepairStep pad_trunc_step(int to_c) {
  RepairStep s{RepairStep::Kind::kPadTruncChannel};
  s.to_c = to_c;
  return s;
}

inline Shape shape_after_step(const Shape& s, const RepairStep& st) {
  switch (st.kind) {
    case RepairStep::Kind::kChannelConv:
      return {st.c_out, s.h, s.w};
    case RepairStep::Kind::kShuffleUp:
      return {s.c / (st.factor * st.factor), s.h * st.factor, s.w * st.factor};
    case RepairStep::Kind::kShuffleDown:
      return {s.c * st.factor * st.factor, s.h / st.factor, s.w / st.factor};
    case RepairStep::Kind::kPadCropSpatial:
      return {s.c, st.to_h, st.to_w};
    case RepairStep::Kind::kPadTruncChannel:
      return {st.to_c, s.h, s.w};
  }
  return s;
}

inline Shape shape_after_steps(Shape s, const std::vector<RepairStep>& steps) {
  for (const auto& st : steps) s = shape_after_step(s, st);
  return s;
}

// A repair attached to one operand slot of one layer. Slot 1 is pred2 of a
// two-input layer; slot 0 is the implicit input of a terminal.
struct Repair {
  int layer = 0;
  int slot = 0;
  Shape from;
  Shape to;
  std::vector<RepairStep> steps;
  friend bool operator==(const Repair&, const Repair&) = default;
};

namespace detail {

inline bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace detail

// Spatial match: channel-preserving rescale by a power-of-two factor.
// Upscale by s: 1x1 conv c -> c*s^2, then pixel shuffle. Downscale by s:
// pixel unshuffle, then 1x1 conv c*s^2 -> c.
inline std::vector<RepairStep> spatial_match_steps(const Shape& from, int to_h,
                                                   int to_w) {
  if (from.h == to_h && from.w == to_w) return {};
  std::vector<RepairStep> steps;
  if (to_h > from.h) {
    if (to_h % from.h != 0 || to_w % from.w != 0)
      throw NonPowerOfTwoRatioError("spatial match " + from.str() + " -> (" +
                                    std::to_string(to_h) + "," +
                                    std::to_string(to_w) + ")");
    const int s = to_h / from.h;
    if (!detail::power_of_two(s) || to_w != from.w * s)
      throw NonPowerOfTwoRatioError("spatial match needs one power-of-two "
                                    "factor on both axes");
    steps.push_back(channel_conv_step(from.c, from.c * s * s));
    steps.push_back(shuffle_up_step(s));
  } else {
    if (from.h % to_h != 0 || from.w % to_w != 0)
      throw NonPowerOfTwoRatioError("spatial match " + from.str() + " -> (" +
                                    std::to_string(to_h) + "," +
                                    std::to_string(to_w) + ")");
    const int s = from.h / to_h;
    if (!detail::power_of_two(s) || from.w != to_w * s)
      throw NonPowerOfTwoRatioError("spatial match needs one power-of-two "
                                    "factor on both axes");
    steps.push_back(shuffle_down_step(s));
    steps.push_back(channel_conv_step(from.c * s * s, from.c));
  }
  return steps;
}

inline std::vector<RepairStep> channel_match_steps(const Shape& from,
                                                   int to_c) {
  if (from.c == to_c) return {};
  return {channel_conv_step(from.c, to_c)};
}

// Full dimension matching: spatial first, then channels.
inline std::vector<RepairStep> dmm_steps(const Shape& from, const Shape& to) {
  auto steps = spatial_match_steps(from, to.h, to.w);
  const Shape mid = shape_after_steps(from, steps);
  for (auto& s : channel_match_steps(mid, to.c)) steps.push_back(s);
  return steps;
}

// Ablation: non-trainable pad/crop/truncate, no ratio restriction.
inline std::vector<RepairStep> zero_pad_steps(const Shape& from,
                                              const Shape& to,
                                              bool match_channels) {
  std::vector<RepairStep> steps;
  if (from.h != to.h || from.w != to.w)
    steps.push_back(pad_crop_step(to.h, to.w));
  if (match_channels && from.c != to.c) steps.push_back(pad_trunc_step(to.c));
  return steps;
}

// Execution plan: per-node output shapes, topological order over active
// layers, and the repairs the executor must apply.
struct ShapePlan {
  Shape input;
  int image_channels = 0;
  int base_width = 0;
  DmmMode mode = DmmMode::kFull;
  std::map<int, Shape> node_shapes;  // layer -> output shape
  std::vector<int> order;            // active layers, ascending
  std::vector<Repair> repairs;

  const Shape& shape_of(int slot) const {
    return slot == 0 ? input : node_shapes.at(slot);
  }

  const Repair* repair_for(int layer, int slot) const {
    for (const auto& r : repairs)
      if (r.layer == layer && r.slot == slot) return &r;
    return nullptr;
  }
};

// Runs shape inference over the active layers, recording repairs where
// operand dimensions disagree. Mode off raises on any mismatch instead.
// Mismatch policy: ElementalAdd repairs pred2 to pred1's full shape; Concat
// repairs pred2's spatial size only; terminals repair the implicit input's
// spatial size back to the block input (channels pass through).
inline ShapePlan infer_shapes(const BlockGraph& g, Shape input, DmmMode mode,
                              int base_width) {
  ShapePlan plan;
  plan.input = input;
  plan.image_channels = input.c;
  plan.base_width = base_width;
  plan.mode = mode;

  auto repair = [&](int layer, int slot, const Shape& from, const Shape& to,
                    bool match_channels) {
    if (mode == DmmMode::kOff)
      throw ShapeMismatchError("layer " + std::to_string(layer) + " operand " +
                               from.str() + " does not match " + to.str() +
                               " and dimension matching is off");
    Repair r;
    r.layer = layer;
    r.slot = slot;
    r.from = from;
    if (mode == DmmMode::kFull) {
      r.steps = match_channels ? dmm_steps(from, to)
                               : spatial_match_steps(from, to.h, to.w);
    } else {
      r.steps = zero_pad_steps(from, to, match_channels);
    }
    r.to = shape_after_steps(from, r.steps);
    plan.repairs.push_back(std::move(r));
  };

  for (int l = 1; l <= g.n_layers(); ++l) {
    if (!g.is_active(l)) continue;
    const NscCode& c = g.code(l);
    Shape out;
    switch (c.op) {
      case OpType::kConvolution: {
        const Shape& s1 = plan.shape_of(c.pred1);
        out = {base_width, s1.h, s1.w};
        break;
      }
      case OpType::kDownsampling: {
        const Shape& s1 = plan.shape_of(c.pred1);
        if (s1.h % 2 != 0 || s1.w % 2 != 0)
          throw ShapeMismatchError("layer " + std::to_string(l) +
                                   ": downsampling needs even spatial size, got " +
                                   s1.str());
        out = {s1.c, s1.h / 2, s1.w / 2};
        break;
      }
      case OpType::kUpsampling: {
        const Shape& s1 = plan.shape_of(c.pred1);
        out = {s1.c, s1.h * 2, s1.w * 2};
        break;
      }
      case OpType::kIdentity:
        out = plan.shape_of(c.pred1);
        break;
      case OpType::kElementalAdd: {
        const Shape& a = plan.shape_of(c.pred1);
        const Shape& b = plan.shape_of(c.pred2);
        if (!(a == b)) repair(l, 1, b, a, true);
        out = a;
        break;
      }
      case OpType::kConcat: {
        const Shape& a = plan.shape_of(c.pred1);
        const Shape& b = plan.shape_of(c.pred2);
        if (a.h != b.h || a.w != b.w) repair(l, 1, b, a, false);
        out = {a.c + b.c, a.h, a.w};
        break;
      }
      case OpType::kTerminal1:
      case OpType::kTerminal2: {
        const Shape& s = plan.shape_of(l - 1);
        if (s.h != input.h || s.w != input.w)
          repair(l, 0, s, {s.c, input.h, input.w}, false);
        out = {plan.image_channels, input.h, input.w};
        break;
      }
    }
    plan.node_shapes[l] = out;
    plan.order.push_back(l);
  }
  return plan;
}

// Parameter count from the plan alone, layer by layer plus trainable repair
// steps. Convolutions carry one PReLU slope per output channel; the scaling
// layers and terminals use plain 1x1 / 3x3 convolutions with bias.
inline std::int64_t count_params(const BlockGraph& g, const ShapePlan& plan) {
  auto conv_params = [](std::int64_t co, std::int64_t ci, std::int64_t k) {
    return co * ci * k * k + co;
  };
  std::int64_t n = 0;
  for (int l : plan.order) {
    const NscCode& c = g.code(l);
    switch (c.op) {
      case OpType::kConvolution: {
        const std::int64_t ci = plan.shape_of(c.pred1).c;
        const std::int64_t co = plan.base_width;
        n += conv_params(co, ci, c.kernel) + co;  // + PReLU slopes
        break;
      }
      case OpType::kDownsampling: {
        const std::int64_t ch = plan.shape_of(c.pred1).c;
        n += conv_params(ch, 4 * ch, 1);
        break;
      }
      case OpType::kUpsampling: {
        const std::int64_t ch = plan.shape_of(c.pred1).c;
        n += conv_params(4 * ch, ch, 1);
        break;
      }
      case OpType::kTerminal1:
      case OpType::kTerminal2: {
        const std::int64_t ci = plan.shape_of(l - 1).c;
        n += conv_params(plan.image_channels, ci, 3);
        break;
      }
      default:
        break;
    }
  }
  for (const auto& r : plan.repairs)
    for (const auto& st : r.steps)
      if (st.kind == RepairStep::Kind::kChannelConv)
        n += conv_params(st.c_out, st.c_in, 1);
  return n;
}

inline nlohmann::json step_to_json(const RepairStep& st) {
  nlohmann::json j;
  switch (st.kind) {
    case RepairStep::Kind::kChannelConv:
      j["kind"] = "channel_conv";
      j["c_in"] = st.c_in;
      j["c_out"] = st.c_out;
      break;
    case RepairStep::Kind::kShuffleUp:
      j["kind"] = "shuffle_up";
      j["factor"] = st.factor;
      break;
    case RepairStep::Kind::kShuffleDown:
      j["kind"] = "shuffle_down";
      j["factor"] = st.factor;
      break;
    case RepairStep::Kind::kPadCropSpatial:
      j["kind"] = "pad_crop_spatial";
      j["to_h"] = st.to_h;
      j["to_w"] = st.to_w;
      break;
    case RepairStep::Kind::kPadTruncChannel:
      j["kind"] = "pad_trunc_channel";
      j["to_c"] = st.to_c;
      break;
  }
  return j;
}

inline nlohmann::json plan_to_json(const ShapePlan& plan) {
  nlohmann::json j;
  j["input"] = {plan.input.c, plan.input.h, plan.input.w};
  j["image_channels"] = plan.image_channels;
  j["base_width"] = plan.base_width;
  j["dmm_mode"] = dmm_mode_name(plan.mode);
  nlohmann::json nodes = nlohmann::json::object();
  for (const auto& [l, s] : plan.node_shapes)
    nodes[std::to_string(l)] = {s.c, s.h, s.w};
  j["nodes"] = std::move(nodes);
  j["order"] = plan.order;
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& r : plan.repairs) {
    nlohmann::json jr;
    jr["layer"] = r.layer;
    jr["slot"] = r.slot;
    jr["from"] = {r.from.c, r.from.h, r.from.w};
    jr["to"] = {r.to.c, r.to.h, r.to.w};
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& st : r.steps) steps.push_back(step_to_json(st));
    jr["steps"] = std::move(steps);
    reps.push_back(std::move(jr));
  }
  j["repairs"] = std::move(reps);
  return j;
}

// Graphviz export over active layers. The block input appears only as an
// edge source, so node statements count exactly the active layers.
inline std::string to_dot(const BlockGraph& g, const ShapePlan* plan) {
  std::ostringstream os;
  os << "digraph block {\n  rankdir=LR;\n";
  for (int l = 1; l <= g.n_layers(); ++l) {
    if (!g.is_active(l)) continue;
    const NscCode& c = g.code(l);
    os << "  l" << l << " [shape=box, label=\"" << l << ": " << op_name(c.op);
    if (c.op == OpType::kConvolution) os << " k" << c.kernel;
    if (plan) {
      const Shape& s = plan->shape_of(l);
      os << "\\n" << s.str();
    }
    os << "\"];\n";
  }
  for (int l = 1; l <= g.n_layers(); ++l) {
    if (!g.is_active(l)) continue;
    for (int p : g.operand_layers(l)) {
      if (p == 0)
        os << "  input -> l" << l << ";\n";
      else
        os << "  l" << p << " -> l" << l << ";\n";
    }
  }
  os << "}\n";
  return os.str();
}

}  // namespace dpnas
