#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dpnas/errors.hpp"
#include "dpnas/rng.hpp"
#include "dpnas/tensor.hpp"

namespace dpnas {

// Procedural clean images: a linear gradient base, a few hard-edged
// rectangles, and low-frequency sinusoids, clamped to [0,1]. Image i depends
// only on (seed, i), so prefixes agree across different counts.
template <typename T>
Tensor<T> synth_image(int size, std::uint64_t seed, std::uint64_t index,
                      int channels = 1) {
  RngStream rng(derive_seed(seed, {index}));
  Tensor<double> img(channels, size, size);
  for (int c = 0; c < channels; ++c) {
    const double v0 = rng.uniform(0.15, 0.85);
    const double gx = rng.uniform(-0.4, 0.4);
    const double gy = rng.uniform(-0.4, 0.4);
    for (int y = 0; y < size; ++y) {
      const double yf = size > 1 ? static_cast<double>(y) / (size - 1) : 0.0;
      for (int x = 0; x < size; ++x) {
        const double xf = size > 1 ? static_cast<double>(x) / (size - 1) : 0.0;
        img.at(c, y, x) = v0 + gx * (xf - 0.5) + gy * (yf - 0.5);
      }
    }
    const int nrect = 2 + static_cast<int>(rng.uniform_int(3));
    for (int r = 0; r < nrect; ++r) {
      const int x0 = static_cast<int>(rng.uniform_int(size));
      const int y0 = static_cast<int>(rng.uniform_int(size));
      const int rw = 1 + static_cast<int>(rng.uniform_int(std::max(1, size / 2)));
      const int rh = 1 + static_cast<int>(rng.uniform_int(std::max(1, size / 2)));
      const double val = rng.uniform(0.05, 0.95);
      for (int y = y0; y < std::min(size, y0 + rh); ++y)
        for (int x = x0; x < std::min(size, x0 + rw); ++x)
          img.at(c, y, x) = val;
    }
    const int nsin = 1 + static_cast<int>(rng.uniform_int(2));
    for (int s = 0; s < nsin; ++s) {
      const double amp = rng.uniform(0.04, 0.12);
      const int fmax = std::max(2, size / 8);
      const double fx = 1.0 + static_cast<double>(rng.uniform_int(fmax));
      const double fy = 1.0 + static_cast<double>(rng.uniform_int(fmax));
      const double phase = rng.uniform(0.0, 6.283185307179586);
      for (int y = 0; y < size; ++y) {
        const double yf = size > 1 ? static_cast<double>(y) / (size - 1) : 0.0;
        for (int x = 0; x < size; ++x) {
          const double xf = size > 1 ? static_cast<double>(x) / (size - 1) : 0.0;
          img.at(c, y, x) +=
              amp * std::sin(6.283185307179586 * (fx * xf + fy * yf) + phase);
        }
      }
    }
  }
  for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img.template cast<T>();
}

template <typename T>
std::vector<Tensor<T>> synth_images(int count, int size, std::uint64_t seed,
                                    int channels = 1) {
  std::vector<Tensor<T>> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i)
    out.push_back(synth_image<T>(size, seed, static_cast<std::uint64_t>(i),
                                 channels));
  return out;
}

// AWGN with sigma on the 0-255 scale; output intentionally not clamped.
template <typename T>
Tensor<T> add_awgn(const Tensor<T>& img, double sigma255, RngStream& rng) {
  Tensor<T> out = img;
  const double s = sigma255 / 255.0;
  for (auto& v : out.data) v += static_cast<T>(rng.normal() * s);
  return out;
}

namespace detail {

inline void skip_pnm_space(std::istream& is) {
  for (;;) {
    const int ch = is.peek();
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
    } else if (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n') {
      is.get();
    } else {
      return;
    }
  }
}

inline int read_pnm_int(std::istream& is) {
  skip_pnm_space(is);
  int v = 0;
  if (!(is >> v)) throw ParseError("bad PNM header field");
  return v;
}

}  // namespace detail

// Binary PGM (P5) / PPM (P6), maxval 255 only. Values normalize to [0,1].
template <typename T>
Tensor<T> load_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open for reading: " + path);
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  if (!is) throw TruncatedFileError("truncated PNM header: " + path);
  int channels;
  if (magic == "P5")
    channels = 1;
  else if (magic == "P6")
    channels = 3;
  else
    throw UnsupportedFormatError("unsupported PNM magic '" + magic + "' in " +
                                 path);
  const int w = detail::read_pnm_int(is);
  const int h = detail::read_pnm_int(is);
  const int maxval = detail::read_pnm_int(is);
  if (maxval != 255)
    throw UnsupportedFormatError("PNM maxval must be 255 in " + path);
  is.get();  // single whitespace before payload
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  is.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (!is) throw TruncatedFileError("truncated PNM payload: " + path);
  Tensor<T> img(channels, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) = static_cast<T>(
            raw[(static_cast<std::size_t>(y) * w + x) * channels + c] / 255.0);
  return img;
}

template <typename T>
void save_pnm(const std::string& path, const Tensor<T>& img) {
  if (img.c != 1 && img.c != 3)
    throw UnsupportedFormatError("PNM supports 1 or 3 channels, got " +
                                 std::to_string(img.c));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path);
  os << (img.c == 1 ? "P5" : "P6") << "\n"
     << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(img.w) * img.h *
                                 img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < img.c; ++c) {
        const double v =
            std::clamp(static_cast<double>(img.at(c, y, x)), 0.0, 1.0);
        raw[(static_cast<std::size_t>(y) * img.w + x) * img.c + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  os.write(reinterpret_cast<const char*>(raw.data()),
           static_cast<std::streamsize>(raw.size()));
  if (!os) throw Error("write failed: " + path);
}

template <typename T>
Tensor<T> center_crop(const Tensor<T>& img, int size) {
  if (img.h < size || img.w < size)
    throw ShapeMismatchError("center_crop: image smaller than crop");
  const int y0 = (img.h - size) / 2;
  const int x0 = (img.w - size) / 2;
  Tensor<T> out(img.c, size, size);
  for (int c = 0; c < img.c; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

// Random fully-in-bounds patches; draw order is (image, y, x) per patch.
template <typename T>
std::vector<Tensor<T>> extract_patches(const std::vector<Tensor<T>>& images,
                                       int patch, int count, RngStream& rng) {
  if (images.empty()) throw Error("extract_patches: no images");
  std::vector<Tensor<T>> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const auto& img = images[rng.uniform_int(images.size())];
    if (img.h < patch || img.w < patch)
      throw ShapeMismatchError("extract_patches: image smaller than patch");
    const int y0 = static_cast<int>(rng.uniform_int(img.h - patch + 1));
    const int x0 = static_cast<int>(rng.uniform_int(img.w - patch + 1));
    Tensor<T> p(img.c, patch, patch);
    for (int c = 0; c < img.c; ++c)
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          p.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    out.push_back(std::move(p));
  }
  return out;
}

struct SplitIndices {
  std::vector<int> train;
  std::vector<int> val;
};

// Seeded disjoint split; round(n * fraction) validation indices.
inline SplitIndices split_indices(int n, double val_fraction, RngStream& rng) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform_int(i + 1));
    std::swap(idx[i], idx[j]);
  }
  const int nval = static_cast<int>(std::lround(n * val_fraction));
  SplitIndices s;
  s.val.assign(idx.begin(), idx.begin() + nval);
  s.train.assign(idx.begin() + nval, idx.end());
  return s;
}

}  // namespace dpnas
