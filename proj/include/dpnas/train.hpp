#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dpnas/block.hpp"
#include "dpnas/data.hpp"
#include "dpnas/errors.hpp"
#include "dpnas/format.hpp"
#include "dpnas/ops.hpp"
#include "dpnas/prior.hpp"
#include "dpnas/rng.hpp"

namespace dpnas {

template <typename T>
struct Sample {
  Tensor<T> noisy;
  Tensor<T> clean;
};

// Stream of (noisy, clean) training batches drawn from clean images with
// fresh patches and fresh noise each call. The stream state is the RNG.
template <typename T>
class PatchSampler {
 public:
  PatchSampler(const std::vector<Tensor<T>>* clean, double sigma255, int patch,
               int batch, RngStream rng)
      : clean_(clean), sigma_(sigma255), patch_(patch), batch_(batch),
        rng_(rng) {}

  std::vector<Sample<T>> next_batch() {
    auto patches = extract_patches(*clean_, patch_, batch_, rng_);
    std::vector<Sample<T>> out;
    out.reserve(patches.size());
    for (auto& p : patches) {
      Sample<T> s;
      s.noisy = add_awgn(p, sigma_, rng_);
      s.clean = std::move(p);
      out.push_back(std::move(s));
    }
    return out;
  }

  const RngStream& rng() const { return rng_; }
  void set_rng(const RngStream& r) { rng_ = r; }

 private:
  const std::vector<Tensor<T>>* clean_;
  double sigma_;
  int patch_;
  int batch_;
  RngStream rng_;
};

struct EarlyStop {
  int interval = 50;
  int patience = 5;
};

// Mean PSNR of clamped outputs over a fixed pair set.
template <typename T, typename Forward>
double mean_psnr(const std::vector<Sample<T>>& pairs, Forward&& fwd) {
  if (pairs.empty()) throw Error("evaluate: empty image set");
  double acc = 0.0;
  for (const auto& s : pairs)
    acc += psnr(clamp01(fwd(s.noisy)), s.clean);
  return acc / static_cast<double>(pairs.size());
}

template <typename T>
struct CandidateOutcome {
  double psnr_early_stop = 0.0;
  int iterations = 0;
};

// Trains one block on the direct denoising objective f(y) ~ x with Adam,
// evaluating every `interval` iterations and stopping after `patience`
// consecutive non-improving evaluations. Returns the best validation PSNR
// seen (including the untrained evaluation at iteration 0).
template <typename T>
CandidateOutcome<T> train_candidate(BlockNet<T>& net, PatchSampler<T>& data,
                                    const std::vector<Sample<T>>& val,
                                    int budget, EarlyStop stop, double lr) {
  auto eval = [&]() {
    return mean_psnr<T>(val, [&](const Tensor<T>& y) { return net.forward(y); });
  };
  auto params = net.params();
  double best = eval();
  int done = 0;
  int stale = 0;
  while (done < budget) {
    const int chunk = std::min(stop.interval, budget - done);
    for (int it = 0; it < chunk; ++it) {
      const auto batch = data.next_batch();
      net.zero_grad();
      double loss = 0.0;
      for (const auto& s : batch) {
        BlockCache<T> cache;
        const auto out = net.forward(s.noisy, &cache);
        loss += mse(out, s.clean);
        Tensor<T> dy(out.c, out.h, out.w);
        const double sc =
            2.0 / (static_cast<double>(out.data.size()) * batch.size());
        for (std::size_t i = 0; i < out.data.size(); ++i)
          dy.data[i] = static_cast<T>(
              sc * (static_cast<double>(out.data[i]) -
                    static_cast<double>(s.clean.data[i])));
        net.backward(cache, dy);
      }
      loss /= static_cast<double>(batch.size());
      if (!std::isfinite(loss))
        throw NonFiniteLossError("candidate loss diverged at iteration " +
                                 std::to_string(done + it + 1));
      for (auto* p : params) adam_step(*p, lr);
    }
    done += chunk;
    const double cur = eval();
    if (cur > best) {
      best = cur;
      stale = 0;
    } else {
      stale += 1;
      if (stale >= stop.patience) break;
    }
  }
  return {best, done};
}

struct MetricsRow {
  std::int64_t iteration = 0;
  double loss = 0.0;
  double val_psnr = 0.0;
};

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  os << "iteration,loss,val_psnr\n";
  for (const auto& r : rows)
    os << r.iteration << "," << fmt_double(r.loss) << ","
       << fmt_double(r.val_psnr) << "\n";
}

// Initial lr halved every 50 epochs.
inline double lr_at_epoch(double lr0, int epoch) {
  return lr0 * std::pow(0.5, epoch / 50);
}

struct TrainFullOptions {
  int iterations = 2000;
  int steps_per_epoch = 7;
  double lr0 = 1e-3;
  int metrics_interval = 100;  // 0 disables metrics rows
};

// Joint training of all K stages on the final-output MSE. Resumable: pass
// `start_iteration` and a sampler whose RNG was restored from the checkpoint.
template <typename T>
std::vector<MetricsRow> train_full(PriorModel<T>& model, PatchSampler<T>& data,
                                   const std::vector<Sample<T>>& val,
                                   const TrainFullOptions& opt,
                                   std::int64_t start_iteration = 0) {
  std::vector<MetricsRow> metrics;
  auto params = model.params();
  for (std::int64_t it = start_iteration; it < opt.iterations; ++it) {
    const double lr =
        lr_at_epoch(opt.lr0, static_cast<int>(it / opt.steps_per_epoch));
    const auto batch = data.next_batch();
    model.zero_grad();
    double loss = 0.0;
    for (const auto& s : batch) {
      PriorCache<T> cache;
      const auto out = model.forward(s.noisy, &cache);
      loss += mse(out, s.clean);
      Tensor<T> dy(out.c, out.h, out.w);
      const double sc =
          2.0 / (static_cast<double>(out.data.size()) * batch.size());
      for (std::size_t i = 0; i < out.data.size(); ++i)
        dy.data[i] = static_cast<T>(sc * (static_cast<double>(out.data[i]) -
                                          static_cast<double>(s.clean.data[i])));
      model.backward(cache, dy);
    }
    loss /= static_cast<double>(batch.size());
    if (!std::isfinite(loss))
      throw NonFiniteLossError("training loss diverged at iteration " +
                               std::to_string(it + 1));
    for (auto* p : params) adam_step(*p, lr);
    if (opt.metrics_interval > 0 &&
        ((it + 1) % opt.metrics_interval == 0 || it + 1 == opt.iterations)) {
      const double vp = mean_psnr<T>(
          val, [&](const Tensor<T>& y) { return model.forward(y); });
      metrics.push_back({it + 1, loss, vp});
    }
  }
  return metrics;
}

template <typename T>
struct EvalReport {
  double mean_psnr = 0.0;
  std::vector<double> per_image;
};

template <typename T>
EvalReport<T> evaluate(PriorModel<T>& model,
                       const std::vector<Sample<T>>& test) {
  if (test.empty()) throw Error("evaluate: empty image set");
  EvalReport<T> rep;
  for (const auto& s : test) {
    const double p = psnr(clamp01(model.forward(s.noisy)), s.clean);
    rep.per_image.push_back(p);
    rep.mean_psnr += p;
  }
  rep.mean_psnr /= static_cast<double>(test.size());
  return rep;
}

}  // namespace dpnas
