#pragma once

#include <algorithm>
#include <compare>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpnas/errors.hpp"

namespace dpnas {

// Block-level network structure codes. Each layer is a 5-tuple
// (index, type, kernel, pred1, pred2); predecessor 0 means the block input.
enum class OpType : int {
  kConvolution = 1,
  kDownsampling = 2,
  kUpsampling = 3,
  kIdentity = 4,
  kElementalAdd = 5,
  kConcat = 6,
  kTerminal1 = 7,
  kTerminal2 = 8,
};

inline bool is_terminal(OpType t) {
  return t == OpType::kTerminal1 || t == OpType::kTerminal2;
}

inline bool is_two_input(OpType t) {
  return t == OpType::kElementalAdd || t == OpType::kConcat;
}

inline bool op_type_known(int v) { return v >= 1 && v <= 8; }

inline const char* op_name(OpType t) {
  switch (t) {
    case OpType::kConvolution: return "conv";
    case OpType::kDownsampling: return "down";
    case OpType::kUpsampling: return "up";
    case OpType::kIdentity: return "identity";
    case OpType::kElementalAdd: return "add";
    case OpType::kConcat: return "concat";
    case OpType::kTerminal1: return "terminal1";
    case OpType::kTerminal2: return "terminal2";
  }
  return "?";
}

struct NscCode {
  int index = 0;
  OpType op = OpType::kConvolution;
  int kernel = 0;
  int pred1 = 0;
  int pred2 = 0;

  friend auto operator<=>(const NscCode&, const NscCode&) = default;
};

inline NscCode make_code(int index, OpType op, int kernel, int p1, int p2) {
  return NscCode{index, op, kernel, p1, p2};
}

enum class IssueKind {
  kEmptySequence,
  kNonConsecutiveIndex,
  kDuplicateIndex,
  kUnknownType,
  kKernelOpMismatch,
  kPredOutOfRange,
  kMissingTerminal,
  kTerminalNotLast,
  kTooManyLayers,
};

struct ValidationIssue {
  IssueKind kind;
  int layer = 0;  // 1-based; 0 when whole-sequence
  std::string message;
};

// Validated block. `active` follows prune_inactive; freshly validated blocks
// have every layer active.
struct BlockGraph {
  std::vector<NscCode> codes;
  std::vector<bool> active;

  int n_layers() const { return static_cast<int>(codes.size()); }
  const NscCode& code(int layer) const { return codes[layer - 1]; }
  bool is_active(int layer) const { return active[layer - 1]; }
  OpType terminal_kind() const { return codes.back().op; }

  // Data operands of a layer; 0 denotes the block input. Terminals read the
  // preceding layer implicitly.
  std::vector<int> operand_layers(int layer) const {
    const NscCode& c = code(layer);
    if (is_terminal(c.op)) return {layer - 1};
    if (is_two_input(c.op)) return {c.pred1, c.pred2};
    return {c.pred1};
  }
};

struct ValidationResult {
  std::optional<BlockGraph> graph;
  std::vector<ValidationIssue> issues;
  bool ok() const { return graph.has_value(); }
};

inline ValidationResult validate(const std::vector<NscCode>& codes,
                                 int max_layers) {
  ValidationResult res;
  auto issue = [&](IssueKind k, int layer, std::string msg) {
    res.issues.push_back({k, layer, std::move(msg)});
  };

  if (codes.empty()) {
    issue(IssueKind::kEmptySequence, 0, "code sequence is empty");
    return res;
  }
  if (static_cast<int>(codes.size()) > max_layers)
    issue(IssueKind::kTooManyLayers, 0,
          "sequence has " + std::to_string(codes.size()) +
              " layers, limit is " + std::to_string(max_layers));

  std::set<int> seen;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const int layer = static_cast<int>(i) + 1;
    const NscCode& c = codes[i];
    if (!seen.insert(c.index).second)
      issue(IssueKind::kDuplicateIndex, layer,
            "index " + std::to_string(c.index) + " repeats");
    else if (c.index != layer)
      issue(IssueKind::kNonConsecutiveIndex, layer,
            "expected index " + std::to_string(layer) + ", got " +
                std::to_string(c.index));

    if (!op_type_known(static_cast<int>(c.op))) {
      issue(IssueKind::kUnknownType, layer,
            "unknown op type " + std::to_string(static_cast<int>(c.op)));
      continue;
    }

    const bool conv = c.op == OpType::kConvolution;
    const bool scale =
        c.op == OpType::kDownsampling || c.op == OpType::kUpsampling;
    if (conv) {
      if (c.kernel != 1 && c.kernel != 3)
        issue(IssueKind::kKernelOpMismatch, layer,
              "convolution kernel must be 1 or 3");
    } else if (scale) {
      if (c.kernel != 2)
        issue(IssueKind::kKernelOpMismatch, layer,
              "scaling layer kernel must be 2");
    } else if (c.kernel != 0) {
      issue(IssueKind::kKernelOpMismatch, layer,
            std::string(op_name(c.op)) + " kernel must be 0");
    }

    if (is_terminal(c.op)) {
      if (c.pred1 != 0 || c.pred2 != 0)
        issue(IssueKind::kPredOutOfRange, layer,
              "terminal predecessors must be 0");
    } else if (is_two_input(c.op)) {
      if (c.pred1 < 0 || c.pred1 >= layer || c.pred2 < 0 || c.pred2 >= layer)
        issue(IssueKind::kPredOutOfRange, layer,
              "predecessors must reference earlier layers or the input");
    } else {
      if (c.pred1 < 0 || c.pred1 >= layer)
        issue(IssueKind::kPredOutOfRange, layer,
              "predecessor must reference an earlier layer or the input");
      if (c.pred2 != 0)
        issue(IssueKind::kPredOutOfRange, layer,
              "single-input layer must have pred2 = 0");
    }

    if (is_terminal(c.op) && i + 1 != codes.size())
      issue(IssueKind::kTerminalNotLast, layer,
            "terminal layer must be the last code");
  }

  if (!is_terminal(codes.back().op))
    issue(IssueKind::kMissingTerminal, 0,
          "sequence must end with a terminal layer");

  if (!res.issues.empty()) return res;

  BlockGraph g;
  g.codes = codes;
  g.active.assign(codes.size(), true);
  res.graph = std::move(g);
  return res;
}

// Marks layers reachable from the terminal; everything else is dead and
// never built or executed. Idempotent: the mask depends only on the codes.
inline BlockGraph prune_inactive(const BlockGraph& g) {
  BlockGraph out = g;
  out.active.assign(g.codes.size(), false);
  std::vector<int> stack = {g.n_layers()};
  while (!stack.empty()) {
    const int l = stack.back();
    stack.pop_back();
    if (l == 0 || out.active[l - 1]) continue;
    out.active[l - 1] = true;
    for (int p : g.operand_layers(l)) stack.push_back(p);
  }
  return out;
}

// Per-episode record of feature dimensions; slot 0 is the block input and
// slot l the output of layer l. Used to mask illegal actions during search.
struct LayerDims {
  int c = 0, h = 0, w = 0;
};

struct EpisodeShapes {
  std::vector<LayerDims> dims;

  EpisodeShapes() = default;
  explicit EpisodeShapes(LayerDims input) : dims{input} {}

  int min_extent() const {
    int m = dims[0].h < dims[0].w ? dims[0].h : dims[0].w;
    for (const auto& d : dims) m = std::min({m, d.h, d.w});
    return m;
  }

  int max_extent() const {
    int m = 0;
    for (const auto& d : dims) m = std::max({m, d.h, d.w});
    return m;
  }

  const LayerDims& of(int slot) const { return dims[slot]; }

  void push(const NscCode& c, int base_width, int image_channels) {
    const LayerDims& p1 = dims[c.pred1];
    LayerDims out;
    switch (c.op) {
      case OpType::kConvolution:
        out = {base_width, p1.h, p1.w};
        break;
      case OpType::kDownsampling:
        out = {p1.c, p1.h / 2, p1.w / 2};
        break;
      case OpType::kUpsampling:
        out = {p1.c, p1.h * 2, p1.w * 2};
        break;
      case OpType::kIdentity:
      case OpType::kElementalAdd:
        out = p1;
        break;
      case OpType::kConcat:
        out = {p1.c + dims[c.pred2].c, p1.h, p1.w};
        break;
      case OpType::kTerminal1:
      case OpType::kTerminal2:
        out = {image_channels, dims[0].h, dims[0].w};
        break;
    }
    dims.push_back(out);
  }
};

struct SearchSpace {
  int max_layers = 8;
  int base_width = 8;
  int image_channels = 1;
  int spatial_floor = 2;
  int channel_cap = 0;  // 0 = unlimited; caps concat output channels
  int spatial_cap = 0;  // 0 = unlimited; caps upsampled extent
  std::vector<int> conv_kernels = {1, 3};
  std::set<OpType> allowed = {
      OpType::kConvolution, OpType::kDownsampling, OpType::kUpsampling,
      OpType::kIdentity,    OpType::kElementalAdd, OpType::kConcat,
      OpType::kTerminal1,   OpType::kTerminal2};
};

// Enumerates the legal codes for the layer at `layer_index` (1-based) given
// the dimensions produced so far. Enumeration order is canonical: action
// indices double as tie-break keys everywhere above this.
//
// Masks: Downsampling is dropped when the smallest extent in scope is odd or
// would fall below the floor; Upsampling when the largest extent would pass
// the cap; Concat candidates whose output width would pass the channel cap.
// Two-input ops are offered from layer 2 onward, where at least two features
// (the input and layer 1) exist; equal predecessors are allowed. Terminals
// are always legal, and are the only actions once the layer budget is
// reached.
inline std::vector<NscCode> legal_actions(int layer_index,
                                          const EpisodeShapes& shapes,
                                          const SearchSpace& space) {
  std::vector<NscCode> out;
  auto offer_terminals = [&]() {
    const bool t1 = space.allowed.count(OpType::kTerminal1) > 0;
    const bool t2 = space.allowed.count(OpType::kTerminal2) > 0;
    if (t1 || !t2) out.push_back(make_code(layer_index, OpType::kTerminal1, 0, 0, 0));
    if (t2) out.push_back(make_code(layer_index, OpType::kTerminal2, 0, 0, 0));
  };

  if (layer_index >= space.max_layers) {
    offer_terminals();
    return out;
  }

  const int npred = layer_index;  // choices 0 .. layer_index-1

  if (space.allowed.count(OpType::kConvolution))
    for (int p = 0; p < npred; ++p)
      for (int k : space.conv_kernels)
        out.push_back(make_code(layer_index, OpType::kConvolution, k, p, 0));

  if (space.allowed.count(OpType::kDownsampling)) {
    const int me = shapes.min_extent();
    if (me % 2 == 0 && me / 2 >= space.spatial_floor)
      for (int p = 0; p < npred; ++p)
        out.push_back(make_code(layer_index, OpType::kDownsampling, 2, p, 0));
  }

  if (space.allowed.count(OpType::kUpsampling)) {
    if (space.spatial_cap == 0 || 2 * shapes.max_extent() <= space.spatial_cap)
      for (int p = 0; p < npred; ++p)
        out.push_back(make_code(layer_index, OpType::kUpsampling, 2, p, 0));
  }

  if (space.allowed.count(OpType::kIdentity))
    for (int p = 0; p < npred; ++p)
      out.push_back(make_code(layer_index, OpType::kIdentity, 0, p, 0));

  if (layer_index >= 2) {
    if (space.allowed.count(OpType::kElementalAdd))
      for (int p1 = 0; p1 < npred; ++p1)
        for (int p2 = 0; p2 < npred; ++p2)
          out.push_back(
              make_code(layer_index, OpType::kElementalAdd, 0, p1, p2));
    if (space.allowed.count(OpType::kConcat))
      for (int p1 = 0; p1 < npred; ++p1)
        for (int p2 = 0; p2 < npred; ++p2) {
          if (space.channel_cap > 0 &&
              shapes.of(p1).c + shapes.of(p2).c > space.channel_cap)
            continue;
          out.push_back(make_code(layer_index, OpType::kConcat, 0, p1, p2));
        }
  }

  offer_terminals();
  return out;
}

inline nlohmann::json code_to_json(const NscCode& c) {
  return nlohmann::json{{"index", c.index},
                        {"type", static_cast<int>(c.op)},
                        {"kernel", c.kernel},
                        {"pred1", c.pred1},
                        {"pred2", c.pred2}};
}

inline nlohmann::json codes_to_json(const std::vector<NscCode>& codes) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : codes) arr.push_back(code_to_json(c));
  return arr;
}

inline nlohmann::json graph_to_json(const BlockGraph& g) {
  return codes_to_json(g.codes);
}

inline NscCode code_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("architecture entry must be an object");
  NscCode c;
  for (const char* key : {"index", "type", "kernel", "pred1", "pred2"}) {
    if (!j.contains(key))
      throw ParseError(std::string("architecture entry missing field '") +
                       key + "'");
    if (!j.at(key).is_number_integer())
      throw ParseError(std::string("architecture field '") + key +
                       "' must be an integer");
  }
  c.index = j.at("index").get<int>();
  c.op = static_cast<OpType>(j.at("type").get<int>());
  c.kernel = j.at("kernel").get<int>();
  c.pred1 = j.at("pred1").get<int>();
  c.pred2 = j.at("pred2").get<int>();
  return c;
}

inline std::vector<NscCode> codes_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ParseError("architecture JSON must be an array");
  std::vector<NscCode> codes;
  for (const auto& e : j) codes.push_back(code_from_json(e));
  return codes;
}

inline BlockGraph graph_from_json(const nlohmann::json& j, int max_layers) {
  const auto codes = codes_from_json(j);
  auto res = validate(codes, max_layers);
  if (!res.ok()) {
    std::string msg = "invalid architecture:";
    for (const auto& is : res.issues) msg += " [" + is.message + "]";
    throw ValidationError(msg);
  }
  return *res.graph;
}

}  // namespace dpnas
