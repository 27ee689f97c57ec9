#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dpnas/block.hpp"
#include "dpnas/compile.hpp"
#include "dpnas/nsc.hpp"
#include "dpnas/ops.hpp"
#include "dpnas/tensor.hpp"

namespace dpnas {

template <typename T>
struct PriorCache {
  std::vector<Tensor<T>> x;  // x^0 .. x^K
  std::vector<Tensor<T>> v;  // v^0 .. v^{K-1}
  std::vector<BlockCache<T>> blocks;
};

// Denoising-prior iteration with identity degradation: K unshared blocks and
// per-stage trainable step scalars. Stage update:
//   x^{k+1} = (1 - d*e - d) * x^k + d * y + d*e * v^k,  v^k = f_k(x^k)
// The three coefficients sum to 1 for any d, e.
template <typename T>
class PriorModel {
 public:
  PriorModel() = default;

  PriorModel(const BlockGraph& g, const ShapePlan& plan, int k,
             std::uint64_t seed, double delta0 = 0.1, double eta0 = 0.9) {
    for (int i = 0; i < k; ++i) {
      blocks_.emplace_back(g, plan, derive_seed(seed, {static_cast<std::uint64_t>(i)}));
      auto d = Param<T>::zeros("stage" + std::to_string(i) + ".delta", {1});
      d.value[0] = static_cast<T>(delta0);
      auto e = Param<T>::zeros("stage" + std::to_string(i) + ".eta", {1});
      e.value[0] = static_cast<T>(eta0);
      deltas_.push_back(std::move(d));
      etas_.push_back(std::move(e));
    }
  }

  int k() const { return static_cast<int>(blocks_.size()); }
  const BlockGraph& graph() const { return blocks_.front().graph(); }
  const ShapePlan& plan() const { return blocks_.front().plan(); }
  BlockNet<T>& block(int i) { return blocks_[i]; }
  Param<T>& delta(int i) { return deltas_[i]; }
  Param<T>& eta(int i) { return etas_[i]; }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& b : blocks_)
      for (auto* p : b.params()) out.push_back(p);
    for (auto& d : deltas_) out.push_back(&d);
    for (auto& e : etas_) out.push_back(&e);
    return out;
  }

  std::vector<std::pair<std::string, Param<T>*>> named_params() {
    std::vector<std::pair<std::string, Param<T>*>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      for (auto& [nm, p] : blocks_[i].named_params())
        out.emplace_back("b" + std::to_string(i) + "." + nm, p);
    for (std::size_t i = 0; i < deltas_.size(); ++i)
      out.emplace_back(deltas_[i].name, &deltas_[i]);
    for (std::size_t i = 0; i < etas_.size(); ++i)
      out.emplace_back(etas_[i].name, &etas_[i]);
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

  Tensor<T> forward(const Tensor<T>& y, PriorCache<T>* cache) {
    PriorCache<T> local;
    PriorCache<T>& c = cache ? *cache : local;
    c.x.assign(1, y);
    c.v.clear();
    c.blocks.assign(blocks_.size(), {});
    for (int i = 0; i < k(); ++i) {
      const double d = static_cast<double>(deltas_[i].value[0]);
      const double e = static_cast<double>(etas_[i].value[0]);
      Tensor<T> v = blocks_[i].forward(c.x[i], &c.blocks[i]);
      Tensor<T> next(y.c, y.h, y.w);
      const T a = static_cast<T>(1.0 - d * e - d);
      const T dd = static_cast<T>(d);
      const T de = static_cast<T>(d * e);
      for (std::size_t j = 0; j < next.data.size(); ++j)
        next.data[j] = a * c.x[i].data[j] + dd * y.data[j] + de * v.data[j];
      c.v.push_back(std::move(v));
      c.x.push_back(std::move(next));
    }
    return c.x.back();
  }

  Tensor<T> forward(const Tensor<T>& y) { return forward(y, nullptr); }

  // Accumulates all parameter gradients; returns dLoss/dy including the
  // contribution through x^0 = y.
  Tensor<T> backward(PriorCache<T>& cache, const Tensor<T>& dout) {
    const Tensor<T>& y = cache.x[0];
    Tensor<T> g = dout;
    Tensor<T> dy(y.c, y.h, y.w);
    for (int i = k() - 1; i >= 0; --i) {
      const double d = static_cast<double>(deltas_[i].value[0]);
      const double e = static_cast<double>(etas_[i].value[0]);
      const Tensor<T>& xk = cache.x[i];
      const Tensor<T>& vk = cache.v[i];
      double gd = 0.0, ge = 0.0;
      for (std::size_t j = 0; j < g.data.size(); ++j) {
        const double gj = static_cast<double>(g.data[j]);
        gd += gj * (-(1.0 + e) * static_cast<double>(xk.data[j]) +
                    static_cast<double>(y.data[j]) +
                    e * static_cast<double>(vk.data[j]));
        ge += gj * d *
              (static_cast<double>(vk.data[j]) - static_cast<double>(xk.data[j]));
      }
      deltas_[i].grad[0] += static_cast<T>(gd);
      etas_[i].grad[0] += static_cast<T>(ge);

      Tensor<T> dv(g.c, g.h, g.w);
      const T de = static_cast<T>(d * e);
      for (std::size_t j = 0; j < g.data.size(); ++j)
        dv.data[j] = de * g.data[j];
      const Tensor<T> dx_block = blocks_[i].backward(cache.blocks[i], dv);

      const T dd = static_cast<T>(d);
      for (std::size_t j = 0; j < dy.data.size(); ++j)
        dy.data[j] += dd * g.data[j];

      const T a = static_cast<T>(1.0 - d * e - d);
      for (std::size_t j = 0; j < g.data.size(); ++j)
        g.data[j] = a * g.data[j] + dx_block.data[j];
    }
    for (std::size_t j = 0; j < dy.data.size(); ++j) dy.data[j] += g.data[j];
    return dy;
  }

 private:
  std::vector<BlockNet<T>> blocks_;
  std::vector<Param<T>> deltas_;
  std::vector<Param<T>> etas_;
};

// Model checkpoint: magic, JSON header (architecture + build metadata), then
// every parameter in named order as dims + f64 payload, with Adam state.
namespace detail {

template <typename T>
void write_param(std::ostream& os, const Param<T>& p) {
  std::vector<std::int64_t> dims(p.dims.begin(), p.dims.end());
  write_raw_dims(os, dims);
  for (auto v : p.value) write_le<double>(os, static_cast<double>(v));
  for (auto v : p.m) write_le<double>(os, static_cast<double>(v));
  for (auto v : p.v) write_le<double>(os, static_cast<double>(v));
  write_le<std::uint64_t>(os, static_cast<std::uint64_t>(p.step));
}

template <typename T>
void read_param(std::istream& is, Param<T>& p, const std::string& name) {
  const auto dims = read_raw_dims(is);
  std::int64_t n = 1;
  for (auto d : dims) n *= d;
  if (n != p.size())
    throw CheckpointError("checkpoint parameter '" + name +
                          "' has wrong size");
  for (auto& v : p.value) v = static_cast<T>(read_le<double>(is));
  for (auto& v : p.m) v = static_cast<T>(read_le<double>(is));
  for (auto& v : p.v) v = static_cast<T>(read_le<double>(is));
  p.step = static_cast<std::int64_t>(read_le<std::uint64_t>(is));
}

}  // namespace detail

inline constexpr char kModelMagic[8] = {'D', 'P', 'N', 'A',
                                        'S', 'M', 'C', '1'};

struct ModelMeta {
  std::vector<NscCode> codes;
  int k = 1;
  int base_width = 8;
  int image_channels = 1;
  int input_h = 32;
  int input_w = 32;
  DmmMode mode = DmmMode::kFull;
  std::uint64_t seed = 0;
  std::int64_t iteration = 0;
  nlohmann::json extra;  // trainer state (rng, schedule position)
};

template <typename T>
void save_prior(const std::string& path, PriorModel<T>& model,
                const ModelMeta& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path);
  os.write(kModelMagic, 8);
  nlohmann::json j;
  j["version"] = 1;
  j["arch"] = codes_to_json(meta.codes);
  j["k"] = meta.k;
  j["base_width"] = meta.base_width;
  j["image_channels"] = meta.image_channels;
  j["input_h"] = meta.input_h;
  j["input_w"] = meta.input_w;
  j["dmm_mode"] = dmm_mode_name(meta.mode);
  j["seed"] = meta.seed;
  j["iteration"] = meta.iteration;
  j["extra"] = meta.extra;
  const std::string header = j.dump();
  detail::write_le<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (auto& [nm, p] : model.named_params()) detail::write_param(os, *p);
  if (!os) throw Error("write failed: " + path);
}

inline ModelMeta read_model_meta(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != std::string(kModelMagic, 8))
    throw CheckpointError("not a model checkpoint");
  const auto len = detail::read_le<std::uint64_t>(is);
  if (len > (1u << 26)) throw CheckpointError("implausible header length");
  std::string header(len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(len));
  if (!is) throw CheckpointError("truncated checkpoint header");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("corrupt checkpoint header");
  }
  if (!j.contains("version") || !j["version"].is_number_integer())
    throw CheckpointError("checkpoint header missing version");
  if (j["version"].get<int>() != 1)
    throw VersionMismatchError("unsupported checkpoint version " +
                               std::to_string(j["version"].get<int>()));
  ModelMeta meta;
  meta.codes = codes_from_json(j.at("arch"));
  meta.k = j.at("k").get<int>();
  meta.base_width = j.at("base_width").get<int>();
  meta.image_channels = j.at("image_channels").get<int>();
  meta.input_h = j.at("input_h").get<int>();
  meta.input_w = j.at("input_w").get<int>();
  meta.mode = dmm_mode_from_name(j.at("dmm_mode").get<std::string>());
  meta.seed = j.at("seed").get<std::uint64_t>();
  meta.iteration = j.at("iteration").get<std::int64_t>();
  meta.extra = j.value("extra", nlohmann::json::object());
  return meta;
}

template <typename T>
std::pair<PriorModel<T>, ModelMeta> load_prior(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open for reading: " + path);
  ModelMeta meta = read_model_meta(is);
  const auto g = graph_from_json(codes_to_json(meta.codes), 1 << 20);
  const auto pruned = prune_inactive(g);
  const auto plan = infer_shapes(
      pruned, {meta.image_channels, meta.input_h, meta.input_w}, meta.mode,
      meta.base_width);
  PriorModel<T> model(pruned, plan, meta.k, meta.seed);
  for (auto& [nm, p] : model.named_params()) {
    try {
      detail::read_param(is, *p, nm);
    } catch (const TruncatedFileError&) {
      throw CheckpointError("truncated checkpoint payload at '" + nm + "'");
    }
  }
  return {std::move(model), std::move(meta)};
}

// Rebuilds the model for a different input size, copying parameters by name.
// Valid whenever the architecture is executable at the new size (repair
// structure depends only on scale ratios, so parameter shapes are unchanged).
template <typename T>
PriorModel<T> reshaped_prior(PriorModel<T>& model, const ModelMeta& meta,
                             int h, int w) {
  const auto g = model.graph();
  const auto plan =
      infer_shapes(g, {meta.image_channels, h, w}, meta.mode, meta.base_width);
  PriorModel<T> out(g, plan, meta.k, meta.seed);
  auto src = model.named_params();
  auto dst = out.named_params();
  if (src.size() != dst.size())
    throw Error("reshape changed the parameter set");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].first != dst[i].first ||
        src[i].second->size() != dst[i].second->size())
      throw Error("reshape changed parameter '" + src[i].first + "'");
    dst[i].second->value = src[i].second->value;
    dst[i].second->m = src[i].second->m;
    dst[i].second->v = src[i].second->v;
    dst[i].second->step = src[i].second->step;
  }
  return out;
}

}  // namespace dpnas
