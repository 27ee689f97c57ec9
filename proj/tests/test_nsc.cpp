#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <vector>

#include "dpnas/nsc.hpp"
#include "dpnas/rng.hpp"
#include "support/oracles.hpp"

using dpnas::BlockGraph;
using dpnas::EpisodeShapes;
using dpnas::IssueKind;
using dpnas::LayerDims;
using dpnas::NscCode;
using dpnas::OpType;
using dpnas::RngStream;
using dpnas::SearchSpace;
using dpnas::make_code;

namespace {

bool has_issue(const dpnas::ValidationResult& r, IssueKind k) {
  for (const auto& is : r.issues)
    if (is.kind == k) return true;
  return false;
}

std::vector<NscCode> minimal_block() {
  return {make_code(1, OpType::kConvolution, 3, 0, 0),
          make_code(2, OpType::kTerminal2, 0, 0, 0)};
}

}  // namespace

TEST_CASE("validate accepts a minimal block", "[nsc]") {
  const auto r = dpnas::validate(minimal_block(), 15);
  REQUIRE(r.ok());
  REQUIRE(r.issues.empty());
  REQUIRE(r.graph->n_layers() == 2);
  REQUIRE(r.graph->is_active(1));
  REQUIRE(r.graph->is_active(2));
  REQUIRE(r.graph->terminal_kind() == OpType::kTerminal2);
}

TEST_CASE("validate reports structured issues", "[nsc]") {
  SECTION("empty sequence") {
    const auto r = dpnas::validate({}, 15);
    REQUIRE_FALSE(r.ok());
    REQUIRE(has_issue(r, IssueKind::kEmptySequence));
  }
  SECTION("missing terminal") {
    const auto r =
        dpnas::validate({make_code(1, OpType::kConvolution, 3, 0, 0)}, 15);
    REQUIRE_FALSE(r.ok());
    REQUIRE(has_issue(r, IssueKind::kMissingTerminal));
  }
  SECTION("terminal not last") {
    const auto r = dpnas::validate({make_code(1, OpType::kTerminal1, 0, 0, 0),
                                    make_code(2, OpType::kConvolution, 3, 0, 0),
                                    make_code(3, OpType::kTerminal1, 0, 0, 0)},
                                   15);
    REQUIRE_FALSE(r.ok());
    REQUIRE(has_issue(r, IssueKind::kTerminalNotLast));
  }
  SECTION("kernel mismatches") {
    auto codes = minimal_block();
    codes[0].kernel = 5;
    REQUIRE(has_issue(dpnas::validate(codes, 15), IssueKind::kKernelOpMismatch));
    codes[0] = make_code(1, OpType::kDownsampling, 3, 0, 0);
    REQUIRE(has_issue(dpnas::validate(codes, 15), IssueKind::kKernelOpMismatch));
    codes[0] = make_code(1, OpType::kIdentity, 1, 0, 0);
    REQUIRE(has_issue(dpnas::validate(codes, 15), IssueKind::kKernelOpMismatch));
  }
  SECTION("forward reference") {
    const auto r = dpnas::validate({make_code(1, OpType::kConvolution, 3, 1, 0),
                                    make_code(2, OpType::kTerminal1, 0, 0, 0)},
                                   15);
    REQUIRE_FALSE(r.ok());
    REQUIRE(has_issue(r, IssueKind::kPredOutOfRange));

    const auto r2 =
        dpnas::validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                         make_code(2, OpType::kElementalAdd, 0, 1, 2),
                         make_code(3, OpType::kTerminal1, 0, 0, 0)},
                        15);
    REQUIRE_FALSE(r2.ok());
    REQUIRE(has_issue(r2, IssueKind::kPredOutOfRange));
  }
  SECTION("terminal with nonzero preds") {
    auto codes = minimal_block();
    codes[1].pred1 = 1;
    REQUIRE(has_issue(dpnas::validate(codes, 15), IssueKind::kPredOutOfRange));
  }
  SECTION("duplicate and misnumbered indices") {
    auto codes = minimal_block();
    codes[1].index = 1;
    REQUIRE(has_issue(dpnas::validate(codes, 15), IssueKind::kDuplicateIndex));
    codes[1].index = 5;
    REQUIRE(
        has_issue(dpnas::validate(codes, 15), IssueKind::kNonConsecutiveIndex));
  }
  SECTION("unknown type") {
    auto codes = minimal_block();
    codes[0].op = static_cast<OpType>(42);
    REQUIRE(has_issue(dpnas::validate(codes, 15), IssueKind::kUnknownType));
  }
  SECTION("layer budget") {
    std::vector<NscCode> codes;
    for (int i = 1; i <= 4; ++i)
      codes.push_back(make_code(i, OpType::kConvolution, 3, i - 1, 0));
    codes.push_back(make_code(5, OpType::kTerminal1, 0, 0, 0));
    REQUIRE(dpnas::validate(codes, 5).ok());
    REQUIRE(has_issue(dpnas::validate(codes, 4), IssueKind::kTooManyLayers));
  }
  SECTION("nonzero pred2 on single-input op") {
    auto codes = minimal_block();
    codes[0].pred2 = 0;
    codes.insert(codes.begin() + 1,
                 make_code(2, OpType::kIdentity, 0, 1, 1));
    codes[2].index = 3;
    REQUIRE(has_issue(dpnas::validate(codes, 15), IssueKind::kPredOutOfRange));
  }
}

TEST_CASE("prune matches the reachability oracle on random episodes",
          "[nsc][prune]") {
  SearchSpace space;
  space.max_layers = 10;
  RngStream rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    const auto codes =
        testsupport::random_episode(space, {8, 32, 32}, rng, 0.18);
    const auto r = dpnas::validate(codes, space.max_layers);
    REQUIRE(r.ok());
    const auto pruned = dpnas::prune_inactive(*r.graph);
    const auto oracle = testsupport::reachable_oracle(*r.graph);
    for (int l = 1; l <= pruned.n_layers(); ++l)
      REQUIRE(pruned.is_active(l) == oracle[l - 1]);
    // idempotence
    const auto twice = dpnas::prune_inactive(pruned);
    REQUIRE(twice.active == pruned.active);
    // the terminal and its implicit operand always survive
    REQUIRE(pruned.is_active(pruned.n_layers()));
    if (pruned.n_layers() > 1) REQUIRE(pruned.is_active(pruned.n_layers() - 1));
  }
}

TEST_CASE("prune keeps a known dead branch out", "[nsc][prune]") {
  // layer 2 computes from layer 1 but nothing consumes it
  const std::vector<NscCode> codes = {
      make_code(1, OpType::kConvolution, 3, 0, 0),
      make_code(2, OpType::kConvolution, 1, 1, 0),
      make_code(3, OpType::kIdentity, 0, 1, 0),
      make_code(4, OpType::kTerminal1, 0, 0, 0)};
  const auto r = dpnas::validate(codes, 15);
  REQUIRE(r.ok());
  const auto pruned = dpnas::prune_inactive(*r.graph);
  REQUIRE(pruned.is_active(1));
  REQUIRE_FALSE(pruned.is_active(2));
  REQUIRE(pruned.is_active(3));
  REQUIRE(pruned.is_active(4));
}

TEST_CASE("legal_actions only emits codes validate accepts", "[nsc][legal]") {
  SearchSpace space;
  space.max_layers = 8;
  space.channel_cap = 64;
  RngStream rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto codes = testsupport::random_episode(space, {8, 32, 32}, rng);
    const auto r = dpnas::validate(codes, space.max_layers);
    INFO("episode length " << codes.size());
    REQUIRE(r.ok());
    REQUIRE(r.issues.empty());
  }
}

TEST_CASE("legal_actions masks downsampling at the spatial floor",
          "[nsc][legal]") {
  SearchSpace space;
  space.spatial_floor = 2;
  EpisodeShapes shapes({8, 4, 4});
  auto down_offered = [&](int layer) {
    for (const auto& a : dpnas::legal_actions(layer, shapes, space))
      if (a.op == OpType::kDownsampling) return true;
    return false;
  };
  REQUIRE(down_offered(1));
  shapes.push(make_code(1, OpType::kDownsampling, 2, 0, 0), 8, 1);
  REQUIRE(shapes.of(1).h == 2);
  // extent 2 with floor 2: halving would land below the floor
  REQUIRE_FALSE(down_offered(2));

  dpnas::SearchSpace sp2;
  sp2.spatial_floor = 1;
  EpisodeShapes odd({8, 3, 3});
  bool any_down = false;
  for (const auto& a : dpnas::legal_actions(1, odd, sp2))
    if (a.op == OpType::kDownsampling) any_down = true;
  REQUIRE_FALSE(any_down);  // odd extent cannot halve
}

TEST_CASE("legal_actions masks upsampling at the spatial cap",
          "[nsc][legal]") {
  SearchSpace space;
  space.spatial_cap = 64;
  EpisodeShapes shapes({8, 32, 32});
  auto up_offered = [&](int layer) {
    for (const auto& a : dpnas::legal_actions(layer, shapes, space))
      if (a.op == OpType::kUpsampling) return true;
    return false;
  };
  REQUIRE(up_offered(1));
  shapes.push(make_code(1, OpType::kUpsampling, 2, 0, 0), 8, 1);
  REQUIRE(shapes.of(1).h == 64);
  REQUIRE_FALSE(up_offered(2));
}

TEST_CASE("legal_actions masks concat above the channel cap", "[nsc][legal]") {
  SearchSpace space;
  space.channel_cap = 16;
  space.base_width = 8;
  EpisodeShapes shapes({8, 16, 16});
  shapes.push(make_code(1, OpType::kConvolution, 3, 0, 0), 8, 1);
  shapes.push(make_code(2, OpType::kConcat, 0, 0, 1), 8, 1);
  REQUIRE(shapes.of(2).c == 16);
  const auto actions = dpnas::legal_actions(3, shapes, space);
  for (const auto& a : actions) {
    if (a.op != OpType::kConcat) continue;
    REQUIRE(shapes.of(a.pred1).c + shapes.of(a.pred2).c <= 16);
    REQUIRE_FALSE(a.pred1 == 2);
    REQUIRE_FALSE(a.pred2 == 2);
  }
}

TEST_CASE("legal_actions offers only terminals at the layer budget",
          "[nsc][legal]") {
  SearchSpace space;
  space.max_layers = 3;
  EpisodeShapes shapes({8, 16, 16});
  shapes.push(make_code(1, OpType::kConvolution, 3, 0, 0), 8, 1);
  shapes.push(make_code(2, OpType::kConvolution, 3, 1, 0), 8, 1);
  const auto actions = dpnas::legal_actions(3, shapes, space);
  REQUIRE(actions.size() == 2);
  for (const auto& a : actions) REQUIRE(dpnas::is_terminal(a.op));
  std::set<OpType> kinds;
  for (const auto& a : actions) kinds.insert(a.op);
  REQUIRE(kinds == std::set<OpType>{OpType::kTerminal1, OpType::kTerminal2});
}

TEST_CASE("legal_actions holds two-input ops until layer 2", "[nsc][legal]") {
  SearchSpace space;
  EpisodeShapes shapes({8, 16, 16});
  for (const auto& a : dpnas::legal_actions(1, shapes, space))
    REQUIRE_FALSE(dpnas::is_two_input(a.op));
  shapes.push(make_code(1, OpType::kConvolution, 3, 0, 0), 8, 1);
  bool add_seen = false, equal_preds_seen = false;
  for (const auto& a : dpnas::legal_actions(2, shapes, space)) {
    if (a.op == OpType::kElementalAdd) {
      add_seen = true;
      if (a.pred1 == a.pred2) equal_preds_seen = true;
    }
  }
  REQUIRE(add_seen);
  REQUIRE(equal_preds_seen);
}

TEST_CASE("legal_actions enumeration is deterministic and duplicate-free",
          "[nsc][legal]") {
  SearchSpace space;
  space.channel_cap = 64;
  EpisodeShapes shapes({8, 32, 32});
  shapes.push(make_code(1, OpType::kConvolution, 3, 0, 0), 8, 1);
  shapes.push(make_code(2, OpType::kDownsampling, 2, 1, 0), 8, 1);
  const auto a = dpnas::legal_actions(3, shapes, space);
  const auto b = dpnas::legal_actions(3, shapes, space);
  REQUIRE(a == b);
  std::set<NscCode> uniq(a.begin(), a.end());
  REQUIRE(uniq.size() == a.size());
}

TEST_CASE("architecture JSON round trips and rejects malformed input",
          "[nsc][json]") {
  SearchSpace space;
  RngStream rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const auto codes = testsupport::random_episode(space, {8, 32, 32}, rng);
    const auto j = dpnas::codes_to_json(codes);
    const auto back = dpnas::codes_from_json(j);
    REQUIRE(back == codes);
    const auto g = dpnas::graph_from_json(j, space.max_layers);
    REQUIRE(g.codes == codes);
  }

  REQUIRE_THROWS_AS(dpnas::codes_from_json(nlohmann::json::object()),
                    dpnas::ParseError);
  REQUIRE_THROWS_AS(
      dpnas::codes_from_json(nlohmann::json::parse(R"([{"index":1}])")),
      dpnas::ParseError);
  REQUIRE_THROWS_AS(
      dpnas::codes_from_json(nlohmann::json::parse(
          R"([{"index":1,"type":"conv","kernel":3,"pred1":0,"pred2":0}])")),
      dpnas::ParseError);
  // well-formed JSON, invalid structure
  REQUIRE_THROWS_AS(
      dpnas::graph_from_json(nlohmann::json::parse(
          R"([{"index":1,"type":1,"kernel":3,"pred1":0,"pred2":0}])"), 15),
      dpnas::ValidationError);
}

TEST_CASE("episode shape tracking follows op semantics", "[nsc]") {
  EpisodeShapes s({1, 32, 48});
  s.push(make_code(1, OpType::kConvolution, 3, 0, 0), 8, 1);
  REQUIRE(s.of(1).c == 8);
  REQUIRE(s.of(1).h == 32);
  REQUIRE(s.of(1).w == 48);
  s.push(make_code(2, OpType::kDownsampling, 2, 1, 0), 8, 1);
  REQUIRE(s.of(2).c == 8);
  REQUIRE(s.of(2).h == 16);
  REQUIRE(s.of(2).w == 24);
  s.push(make_code(3, OpType::kUpsampling, 2, 2, 0), 8, 1);
  REQUIRE(s.of(3).h == 32);
  s.push(make_code(4, OpType::kConcat, 0, 1, 3), 8, 1);
  REQUIRE(s.of(4).c == 16);
  s.push(make_code(5, OpType::kElementalAdd, 0, 1, 4), 8, 1);
  REQUIRE(s.of(5).c == 8);  // first operand is authoritative
  s.push(make_code(6, OpType::kTerminal2, 0, 0, 0), 8, 1);
  REQUIRE(s.of(6).c == 1);
  REQUIRE(s.of(6).h == 32);
  REQUIRE(s.of(6).w == 48);
  REQUIRE(s.min_extent() == 16);
  REQUIRE(s.max_extent() == 48);
}
