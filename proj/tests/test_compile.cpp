#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "dpnas/compile.hpp"
#include "dpnas/nsc.hpp"
#include "dpnas/rng.hpp"
#include "support/oracles.hpp"

using dpnas::BlockGraph;
using dpnas::DmmMode;
using dpnas::NscCode;
using dpnas::OpType;
using dpnas::RepairStep;
using dpnas::RngStream;
using dpnas::SearchSpace;
using dpnas::Shape;
using dpnas::make_code;

namespace {

BlockGraph must_validate(const std::vector<NscCode>& codes,
                         int max_layers = 15) {
  auto r = dpnas::validate(codes, max_layers);
  REQUIRE(r.ok());
  return *r.graph;
}

}  // namespace

TEST_CASE("spatial match steps follow the two branches", "[compile][sm]") {
  SECTION("upscale by 2") {
    const auto steps = dpnas::spatial_match_steps({16, 16, 16}, 32, 32);
    REQUIRE(steps.size() == 2);
    REQUIRE(steps[0].kind == RepairStep::Kind::kChannelConv);
    REQUIRE(steps[0].c_in == 16);
    REQUIRE(steps[0].c_out == 64);
    REQUIRE(steps[1].kind == RepairStep::Kind::kShuffleUp);
    REQUIRE(steps[1].factor == 2);
    REQUIRE(dpnas::shape_after_steps({16, 16, 16}, steps) ==
            Shape{16, 32, 32});
  }
  SECTION("downscale by 2") {
    const auto steps = dpnas::spatial_match_steps({8, 32, 32}, 16, 16);
    REQUIRE(steps.size() == 2);
    REQUIRE(steps[0].kind == RepairStep::Kind::kShuffleDown);
    REQUIRE(steps[0].factor == 2);
    REQUIRE(dpnas::shape_after_step({8, 32, 32}, steps[0]) ==
            Shape{32, 16, 16});
    REQUIRE(steps[1].kind == RepairStep::Kind::kChannelConv);
    REQUIRE(steps[1].c_in == 32);
    REQUIRE(steps[1].c_out == 8);
    REQUIRE(dpnas::shape_after_steps({8, 32, 32}, steps) == Shape{8, 16, 16});
  }
  SECTION("equal spatial is a no-op") {
    REQUIRE(dpnas::spatial_match_steps({8, 32, 32}, 32, 32).empty());
  }
  SECTION("non power-of-two ratios are rejected") {
    REQUIRE_THROWS_AS(dpnas::spatial_match_steps({8, 32, 32}, 12, 12),
                      dpnas::NonPowerOfTwoRatioError);
    REQUIRE_THROWS_AS(dpnas::spatial_match_steps({8, 32, 32}, 96, 96),
                      dpnas::NonPowerOfTwoRatioError);
    REQUIRE_THROWS_AS(dpnas::spatial_match_steps({8, 32, 32}, 64, 32),
                      dpnas::NonPowerOfTwoRatioError);
  }
  SECTION("channel preservation and power-of-two scaling for many factors") {
    for (int k = -3; k <= 3; ++k) {
      const int s = 1 << (k < 0 ? -k : k);
      const Shape from{8, 32, 32};
      const int th = k >= 0 ? from.h * s : from.h / s;
      const int tw = k >= 0 ? from.w * s : from.w / s;
      const auto steps = dpnas::spatial_match_steps(from, th, tw);
      const Shape out = dpnas::shape_after_steps(from, steps);
      REQUIRE(out.c == from.c);
      REQUIRE(out.h == th);
      REQUIRE(out.w == tw);
      // round trip back to the original shape
      const auto back = dpnas::spatial_match_steps(out, from.h, from.w);
      REQUIRE(dpnas::shape_after_steps(out, back) == from);
    }
  }
}

TEST_CASE("channel match steps", "[compile][cm]") {
  const auto a = dpnas::channel_match_steps({16, 8, 8}, 8);
  REQUIRE(a.size() == 1);
  REQUIRE(a[0].kind == RepairStep::Kind::kChannelConv);
  REQUIRE(a[0].c_in == 16);
  REQUIRE(a[0].c_out == 8);
  REQUIRE(dpnas::channel_match_steps({8, 8, 8}, 8).empty());
  const auto b = dpnas::channel_match_steps({3, 8, 8}, 64);
  REQUIRE(b.size() == 1);
  REQUIRE(b[0].c_in == 3);
  REQUIRE(b[0].c_out == 64);
}

TEST_CASE("dmm composes spatial then channel", "[compile][dmm]") {
  SECTION("up then channel reduce") {
    const auto steps = dpnas::dmm_steps({16, 16, 16}, {8, 32, 32});
    REQUIRE(steps.size() == 3);
    REQUIRE(steps[0].kind == RepairStep::Kind::kChannelConv);
    REQUIRE(steps[0].c_out == 64);
    REQUIRE(steps[1].kind == RepairStep::Kind::kShuffleUp);
    REQUIRE(steps[2].kind == RepairStep::Kind::kChannelConv);
    REQUIRE(steps[2].c_in == 16);
    REQUIRE(steps[2].c_out == 8);
    REQUIRE(dpnas::shape_after_steps({16, 16, 16}, steps) == Shape{8, 32, 32});
  }
  SECTION("identical shapes") {
    REQUIRE(dpnas::dmm_steps({8, 16, 16}, {8, 16, 16}).empty());
  }
  SECTION("single shuffle covers factor 4") {
    const auto steps = dpnas::dmm_steps({4, 64, 64}, {4, 16, 16});
    REQUIRE(steps.size() == 2);
    REQUIRE(steps[0].kind == RepairStep::Kind::kShuffleDown);
    REQUIRE(steps[0].factor == 4);
    REQUIRE(steps[1].kind == RepairStep::Kind::kChannelConv);
    REQUIRE(steps[1].c_in == 64);
    REQUIRE(steps[1].c_out == 4);
    REQUIRE(dpnas::shape_after_steps({4, 64, 64}, steps) == Shape{4, 16, 16});
  }
}

TEST_CASE("zero pad steps have no ratio restriction and no weights",
          "[compile][dmm]") {
  const auto steps = dpnas::zero_pad_steps({5, 30, 30}, {8, 32, 32}, true);
  REQUIRE(steps.size() == 2);
  REQUIRE(steps[0].kind == RepairStep::Kind::kPadCropSpatial);
  REQUIRE(steps[1].kind == RepairStep::Kind::kPadTruncChannel);
  REQUIRE(dpnas::shape_after_steps({5, 30, 30}, steps) == Shape{8, 32, 32});
  const auto spatial_only = dpnas::zero_pad_steps({5, 30, 30}, {8, 32, 32}, false);
  REQUIRE(spatial_only.size() == 1);
  REQUIRE(dpnas::zero_pad_steps({8, 32, 32}, {8, 32, 32}, true).empty());
}

TEST_CASE("infer_shapes applies op semantics", "[compile]") {
  // conv, down, up chain
  const auto g = must_validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                                make_code(2, OpType::kDownsampling, 2, 1, 0),
                                make_code(3, OpType::kUpsampling, 2, 2, 0),
                                make_code(4, OpType::kTerminal1, 0, 0, 0)});
  const auto plan = dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kFull, 8);
  REQUIRE(plan.node_shapes.at(1) == Shape{8, 32, 32});
  REQUIRE(plan.node_shapes.at(2) == Shape{8, 16, 16});
  REQUIRE(plan.node_shapes.at(3) == Shape{8, 32, 32});
  REQUIRE(plan.node_shapes.at(4) == Shape{1, 32, 32});
  REQUIRE(plan.order == std::vector<int>{1, 2, 3, 4});
  REQUIRE(plan.repairs.empty());
}

TEST_CASE("infer_shapes repairs an add operand per the worked example",
          "[compile]") {
  // pred1 (8,32,32), pred2 (16,16,16): SM up 2 (channel-preserving), CM 16->8
  const auto g = must_validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                                make_code(2, OpType::kDownsampling, 2, 1, 0),
                                make_code(3, OpType::kConcat, 0, 2, 2),
                                make_code(4, OpType::kElementalAdd, 0, 1, 3),
                                make_code(5, OpType::kTerminal1, 0, 0, 0)});
  const auto plan = dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kFull, 8);
  REQUIRE(plan.node_shapes.at(3) == Shape{16, 16, 16});
  REQUIRE(plan.node_shapes.at(4) == Shape{8, 32, 32});
  REQUIRE(plan.repairs.size() == 1);
  const auto& r = plan.repairs[0];
  REQUIRE(r.layer == 4);
  REQUIRE(r.slot == 1);
  REQUIRE(r.from == Shape{16, 16, 16});
  REQUIRE(r.to == Shape{8, 32, 32});
  REQUIRE(r.steps.size() == 3);
  REQUIRE(r.steps[0].kind == RepairStep::Kind::kChannelConv);
  REQUIRE(r.steps[0].c_in == 16);
  REQUIRE(r.steps[0].c_out == 64);
  REQUIRE(r.steps[1].kind == RepairStep::Kind::kShuffleUp);
  REQUIRE(r.steps[1].factor == 2);
  REQUIRE(r.steps[2].kind == RepairStep::Kind::kChannelConv);
  REQUIRE(r.steps[2].c_in == 16);
  REQUIRE(r.steps[2].c_out == 8);

  // concat repairs spatial only
  const auto g2 = must_validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                                 make_code(2, OpType::kDownsampling, 2, 1, 0),
                                 make_code(3, OpType::kConcat, 0, 1, 2),
                                 make_code(4, OpType::kTerminal1, 0, 0, 0)});
  const auto plan2 = dpnas::infer_shapes(g2, {1, 32, 32}, DmmMode::kFull, 8);
  REQUIRE(plan2.repairs.size() == 1);
  REQUIRE(plan2.repairs[0].layer == 3);
  REQUIRE(plan2.repairs[0].to == Shape{8, 32, 32});
  REQUIRE(plan2.node_shapes.at(3) == Shape{16, 32, 32});
}

TEST_CASE("terminal input is repaired to the block-input spatial size",
          "[compile]") {
  const auto g = must_validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                                make_code(2, OpType::kDownsampling, 2, 1, 0),
                                make_code(3, OpType::kTerminal2, 0, 0, 0)});
  const auto plan = dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kFull, 8);
  REQUIRE(plan.repairs.size() == 1);
  REQUIRE(plan.repairs[0].layer == 3);
  REQUIRE(plan.repairs[0].slot == 0);
  REQUIRE(plan.repairs[0].from == Shape{8, 16, 16});
  // spatial-only repair: channels pass through
  REQUIRE(plan.repairs[0].to == Shape{8, 32, 32});
  REQUIRE(plan.node_shapes.at(3) == Shape{1, 32, 32});
}

TEST_CASE("mode off raises exactly on pre-repair disagreement", "[compile]") {
  SearchSpace space;
  space.max_layers = 10;
  space.channel_cap = 64;
  RngStream rng(555);
  int mismatched = 0, clean = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const auto codes =
        testsupport::random_episode(space, {1, 32, 32}, rng, 0.2);
    const auto g = must_validate(codes, space.max_layers);
    const auto full = dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kFull, 8);
    const bool disagree = !full.repairs.empty();
    if (disagree) {
      ++mismatched;
      REQUIRE_THROWS_AS(
          dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kOff, 8),
          dpnas::ShapeMismatchError);
    } else {
      ++clean;
      REQUIRE_NOTHROW(dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kOff, 8));
    }
  }
  REQUIRE(mismatched > 10);
  REQUIRE(clean > 10);
}

TEST_CASE("count_params reproduces the worked examples", "[compile][params]") {
  SECTION("conv + terminal at width 64") {
    const auto g = must_validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                                  make_code(2, OpType::kTerminal1, 0, 0, 0)});
    const auto plan = dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kFull, 64);
    REQUIRE(dpnas::count_params(g, plan) == 1281);
  }
  SECTION("identity + terminal") {
    const auto g = must_validate({make_code(1, OpType::kIdentity, 0, 0, 0),
                                  make_code(2, OpType::kTerminal1, 0, 0, 0)});
    const auto plan = dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kFull, 64);
    REQUIRE(dpnas::count_params(g, plan) == 10);
  }
  SECTION("one downsampling layer at c=64 adds 16448") {
    const auto base =
        must_validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                       make_code(2, OpType::kTerminal1, 0, 0, 0)});
    const auto with_down =
        must_validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                       make_code(2, OpType::kDownsampling, 2, 1, 0),
                       make_code(3, OpType::kTerminal1, 0, 0, 0)});
    const auto p0 = dpnas::infer_shapes(base, {1, 32, 32}, DmmMode::kFull, 64);
    const auto p1 =
        dpnas::infer_shapes(with_down, {1, 32, 32}, DmmMode::kFull, 64);
    // the second graph also repairs the terminal input (16,16)->(32,32):
    // shuffle-up path is conv 64->256, 256*64+256 params
    const std::int64_t repair = 256 * 64 + 256;
    REQUIRE(dpnas::count_params(with_down, p1) -
                dpnas::count_params(base, p0) ==
            16448 + repair);
  }
}

TEST_CASE("plan JSON serialization carries the full structure",
          "[compile][json]") {
  const auto g = must_validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                                make_code(2, OpType::kDownsampling, 2, 1, 0),
                                make_code(3, OpType::kTerminal2, 0, 0, 0)});
  const auto plan = dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kFull, 8);
  const auto j = dpnas::plan_to_json(plan);
  REQUIRE(j["input"] == nlohmann::json({1, 32, 32}));
  REQUIRE(j["base_width"] == 8);
  REQUIRE(j["dmm_mode"] == "full");
  REQUIRE(j["nodes"]["2"] == nlohmann::json({8, 16, 16}));
  REQUIRE(j["order"] == nlohmann::json({1, 2, 3}));
  REQUIRE(j["repairs"].size() == 1);
  REQUIRE(j["repairs"][0]["layer"] == 3);
  REQUIRE(j["repairs"][0]["steps"][0]["kind"] == "channel_conv");
  REQUIRE(j["repairs"][0]["steps"][1]["kind"] == "shuffle_up");
}

TEST_CASE("dot export counts nodes and edges", "[compile][dot]") {
  const auto g = must_validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                                make_code(2, OpType::kTerminal2, 0, 0, 0)});
  const auto plan = dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kFull, 8);
  const auto dot = dpnas::to_dot(g, &plan);
  auto count = [&](const std::string& needle) {
    int n = 0;
    for (std::size_t pos = dot.find(needle); pos != std::string::npos;
         pos = dot.find(needle, pos + needle.size()))
      ++n;
    return n;
  };
  REQUIRE(count("[shape=box") == 2);
  REQUIRE(count(" -> ") == 2);
  REQUIRE(count("input -> ") == 1);
  REQUIRE(dot.find("conv k3") != std::string::npos);
  REQUIRE(dot.find("(8,32,32)") != std::string::npos);

  // pruned graphs draw only active layers
  const auto g2 = must_validate({make_code(1, OpType::kConvolution, 3, 0, 0),
                                 make_code(2, OpType::kConvolution, 1, 1, 0),
                                 make_code(3, OpType::kIdentity, 0, 1, 0),
                                 make_code(4, OpType::kTerminal1, 0, 0, 0)});
  const auto pruned = dpnas::prune_inactive(g2);
  const auto dot2 = dpnas::to_dot(pruned, nullptr);
  REQUIRE(dot2.find("l2 ") == std::string::npos);
}

TEST_CASE("inferred shapes only scale by powers of two", "[compile]") {
  SearchSpace space;
  space.max_layers = 10;
  space.channel_cap = 64;
  RngStream rng(556);
  for (int trial = 0; trial < 100; ++trial) {
    const auto codes = testsupport::random_episode(space, {1, 32, 32}, rng);
    const auto g = must_validate(codes, space.max_layers);
    const auto plan = dpnas::infer_shapes(g, {1, 32, 32}, DmmMode::kFull, 8);
    for (const auto& [l, s] : plan.node_shapes) {
      const int big = std::max(s.h, 32), small = std::min(s.h, 32);
      REQUIRE(big % small == 0);
      REQUIRE(((big / small) & (big / small - 1)) == 0);
      REQUIRE(s.h == s.w);  // square input stays square
    }
  }
}
