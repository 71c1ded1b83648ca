#include "dnas/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "binary_io.hpp"
#include "dnas/errors.hpp"
#include "dnas/rng.hpp"

namespace dnas {
namespace {

constexpr char kPoolMagic[8] = {'D', 'N', 'A', 'S', 'P', 'O', 'O', 'L'};
constexpr std::uint32_t kPoolVersion = 1;
constexpr int kShapeKinds = 7;

bool inside(int kind, double dx, double dy, double r) {
  switch (kind) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case 2: {
      // upright triangle with apex (0, -r) and base at dy = r
      if (dy > r || dy < -r) return false;
      return std::abs(dx) <= 0.5 * (dy + r);
    }
    case 3: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    case 4:
      return std::abs(dx) + std::abs(dy) <= r;
    case 5:
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    default:
      return std::abs(dx) <= r && std::abs(dy) <= 0.35 * r;
  }
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

struct Axis {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> t;
};

Axis lerp_axis(std::int64_t in, std::int64_t out) {
  Axis a;
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    a.i0.push_back(lo);
    a.i1.push_back(std::min(lo + 1, in - 1));
    a.t.push_back(src - static_cast<double>(lo));
  }
  return a;
}

}  // namespace

void DataConfig::validate() const {
  if (classes < 2) throw ConfigError("data.classes: need at least 2 classes");
  if (classes > 255) throw ConfigError("data.classes: at most 255 classes");
  if (height < 8 || width < 8) throw ConfigError("data.height/width: images must be at least 8x8");
  if (fine_train < 0 || coarse_train < 0 || validation < 0) throw ConfigError("data: pool sizes must be >= 0");
  if (coarse_margin < 0) throw ConfigError("data.coarse_margin: must be >= 0");
  const auto& a = augment;
  for (double p : {a.p_flip, a.p_scale, a.p_jitter, a.p_noise})
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("data.augment: probabilities must lie in [0, 1]");
  if (!(a.scale_min > 0.0 && a.scale_min <= a.scale_max)) throw ConfigError("data.augment: bad scale range");
  if (!(a.jitter >= 0.0) || !(a.noise_std >= 0.0)) throw ConfigError("data.augment: negative magnitude");
}

SegSample generate_sample(const DataConfig& cfg, std::uint64_t seed, std::int64_t id) {
  Rng rng(seed);
  const std::int64_t h = cfg.height, w = cfg.width, hw = h * w;
  SegSample s;
  s.height = h;
  s.width = w;
  s.id = id;
  s.image = Tensor(Shape{3, h, w});
  s.label.assign(static_cast<std::size_t>(hw), 0);

  std::array<double, 3> bg{0.45, 0.45, 0.45};
  for (auto& c : bg) c = clamp01(c + rng.uniform(-0.15, 0.15));
  const double fx = rng.uniform(0.1, 0.5), fy = rng.uniform(0.1, 0.5);
  const double px = rng.uniform(0.0, 6.283185307179586), py = rng.uniform(0.0, 6.283185307179586);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double tex = 0.08 * std::sin(fx * static_cast<double>(x) + px) * std::sin(fy * static_cast<double>(y) + py);
      for (std::int64_t c = 0; c < 3; ++c)
        s.image[c * hw + y * w + x] = clamp01(bg[static_cast<std::size_t>(c)] + tex + 0.02 * rng.normal());
    }

  const double unit = static_cast<double>(std::min(h, w)) / 64.0;
  const int shapes = 1 + static_cast<int>(rng.below(4));
  for (int k = 0; k < shapes; ++k) {
    const int cls = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.classes - 1)));
    const int kind = (cls - 1) % kShapeKinds;
    const double r = rng.uniform(6.0, 16.0) * unit;
    const double cx = rng.uniform(0.0, static_cast<double>(w)), cy = rng.uniform(0.0, static_cast<double>(h));
    std::array<double, 3> col{};
    do {
      for (auto& c : col) c = rng.uniform(0.05, 0.95);
    } while (std::abs(col[0] - bg[0]) + std::abs(col[1] - bg[1]) + std::abs(col[2] - bg[2]) < 0.45);
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cy - r - 1));
    const auto y1 = std::min<std::int64_t>(h, static_cast<std::int64_t>(cy + r + 2));
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cx - r - 1));
    const auto x1 = std::min<std::int64_t>(w, static_cast<std::int64_t>(cx + r + 2));
    for (std::int64_t y = y0; y < y1; ++y)
      for (std::int64_t x = x0; x < x1; ++x) {
        if (!inside(kind, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, r)) continue;
        s.label[static_cast<std::size_t>(y * w + x)] = static_cast<std::uint8_t>(cls);
        for (std::int64_t c = 0; c < 3; ++c) s.image[c * hw + y * w + x] = col[static_cast<std::size_t>(c)];
      }
  }
  for (auto& v : s.image.data()) v = clamp01(v + 0.02 * rng.normal());
  return s;
}

DataPools generate(const DataConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DataPools pools;
  auto fill = [&](std::vector<SegSample>& pool, int count, const char* tag, bool coarse) {
    pool.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      SegSample s = generate_sample(cfg, derive_seed(seed, {tag_of(tag), static_cast<std::uint64_t>(i)}), i);
      if (coarse) {
        s.label = coarsen(s.label, s.height, s.width, cfg.coarse_margin);
        s.coarse = true;
      }
      pool.push_back(std::move(s));
    }
  };
  fill(pools.fine_train, cfg.fine_train, "pool.fine", false);
  fill(pools.coarse_train, cfg.coarse_train, "pool.coarse", true);
  fill(pools.validation, cfg.validation, "pool.validation", false);
  return pools;
}

std::vector<std::uint8_t> coarsen(std::span<const std::uint8_t> label, std::int64_t h, std::int64_t w, int margin) {
  if (static_cast<std::int64_t>(label.size()) != h * w) {
    throw ShapeError("coarsen: label has " + std::to_string(label.size()) + " pixels, expected " +
                     std::to_string(h * w));
  }
  std::vector<std::uint8_t> out(label.begin(), label.end());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const std::uint8_t v = label[static_cast<std::size_t>(y * w + x)];
      if (v == kIgnore) continue;
      bool uniform = true;
      for (std::int64_t yy = std::max<std::int64_t>(0, y - margin); uniform && yy <= std::min(h - 1, y + margin); ++yy)
        for (std::int64_t xx = std::max<std::int64_t>(0, x - margin); xx <= std::min(w - 1, x + margin); ++xx)
          if (label[static_cast<std::size_t>(yy * w + xx)] != v) {
            uniform = false;
            break;
          }
      if (!uniform) out[static_cast<std::size_t>(y * w + x)] = kIgnore;
    }
  return out;
}

ConfusionMatrix::ConfusionMatrix(int classes)
    : classes_(classes), counts_(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0) {
  if (classes < 1) throw MetricError("ConfusionMatrix: need at least one class");
}

void ConfusionMatrix::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label) {
  if (pred.size() != label.size()) {
    throw ShapeError("miou: prediction has " + std::to_string(pred.size()) + " pixels, label has " +
                     std::to_string(label.size()));
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (label[i] == kIgnore) continue;
    if (label[i] >= classes_ || pred[i] >= classes_) {
      throw MetricError("miou: class id out of range at pixel " + std::to_string(i));
    }
    ++counts_[static_cast<std::size_t>(label[i]) * static_cast<std::size_t>(classes_) + pred[i]];
    ++counted_;
  }
}

std::int64_t ConfusionMatrix::at(int label, int prediction) const {
  return counts_[static_cast<std::size_t>(label) * static_cast<std::size_t>(classes_) +
                 static_cast<std::size_t>(prediction)];
}

double ConfusionMatrix::miou() const {
  if (counted_ == 0) throw MetricError("miou: every pixel is ignored");
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < classes_; ++c) {
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < classes_; ++k) {
      row += at(c, k);
      col += at(k, c);
    }
    const std::int64_t tp = at(c, c);
    const std::int64_t uni = row + col - tp;
    if (uni == 0) continue;
    sum += static_cast<double>(tp) / static_cast<double>(uni);
    ++present;
  }
  return sum / present;
}

double miou(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels, int classes) {
  ConfusionMatrix cm(classes);
  cm.add(predictions, labels);
  return cm.miou();
}

SegSample augment(const SegSample& in, const AugmentConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  SegSample s = in;
  const std::int64_t h = s.height, w = s.width, hw = h * w;

  if (rng.bernoulli(cfg.p_flip)) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t c = 0; c < 3; ++c) {
        double* row = s.image.ptr() + c * hw + y * w;
        std::reverse(row, row + w);
      }
      std::reverse(s.label.begin() + y * w, s.label.begin() + (y + 1) * w);
    }
  }

  if (rng.bernoulli(cfg.p_scale)) {
    const double f = rng.uniform(cfg.scale_min, cfg.scale_max);
    const auto nh = std::max<std::int64_t>(1, std::llround(static_cast<double>(h) * f));
    const auto nw = std::max<std::int64_t>(1, std::llround(static_cast<double>(w) * f));
    const Axis ay = lerp_axis(h, nh), ax = lerp_axis(w, nw);
    std::vector<double> img(static_cast<std::size_t>(3 * nh * nw));
    std::vector<std::uint8_t> lab(static_cast<std::size_t>(nh * nw));
    for (std::int64_t y = 0; y < nh; ++y)
      for (std::int64_t x = 0; x < nw; ++x) {
        const auto uy = static_cast<std::size_t>(y), ux = static_cast<std::size_t>(x);
        for (std::int64_t c = 0; c < 3; ++c) {
          const double* p = s.image.ptr() + c * hw;
          const double top = (1 - ax.t[ux]) * p[ay.i0[uy] * w + ax.i0[ux]] + ax.t[ux] * p[ay.i0[uy] * w + ax.i1[ux]];
          const double bot = (1 - ax.t[ux]) * p[ay.i1[uy] * w + ax.i0[ux]] + ax.t[ux] * p[ay.i1[uy] * w + ax.i1[ux]];
          img[static_cast<std::size_t>((c * nh + y) * nw + x)] = (1 - ay.t[uy]) * top + ay.t[uy] * bot;
        }
        const auto sy = std::min(h - 1, static_cast<std::int64_t>((static_cast<double>(y) + 0.5) / f));
        const auto sx = std::min(w - 1, static_cast<std::int64_t>((static_cast<double>(x) + 0.5) / f));
        lab[static_cast<std::size_t>(y * nw + x)] = s.label[static_cast<std::size_t>(sy * w + sx)];
      }
    // crop when larger, pad (image 0, label ignore) when smaller
    const std::int64_t oy = nh >= h ? static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(nh - h + 1)))
                                    : -static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(h - nh + 1)));
    const std::int64_t ox = nw >= w ? static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(nw - w + 1)))
                                    : -static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w - nw + 1)));
    s.image.fill(0.0);
    std::fill(s.label.begin(), s.label.end(), kIgnore);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sy = y + oy, sx = x + ox;
        if (sy < 0 || sy >= nh || sx < 0 || sx >= nw) continue;
        for (std::int64_t c = 0; c < 3; ++c)
          s.image[c * hw + y * w + x] = img[static_cast<std::size_t>((c * nh + sy) * nw + sx)];
        s.label[static_cast<std::size_t>(y * w + x)] = lab[static_cast<std::size_t>(sy * nw + sx)];
      }
  }

  if (rng.bernoulli(cfg.p_jitter)) {
    const double brightness = rng.uniform(-cfg.jitter, cfg.jitter);
    const double contrast = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
    double mean = 0.0;
    for (double v : s.image.data()) mean += v;
    mean /= static_cast<double>(s.image.numel());
    for (auto& v : s.image.data()) v = clamp01((v - mean) * contrast + mean + brightness);
  }

  if (rng.bernoulli(cfg.p_noise)) {
    for (auto& v : s.image.data()) v = clamp01(v + cfg.noise_std * rng.normal());
  }
  return s;
}

Tensor stack_images(std::span<const SegSample* const> samples) {
  if (samples.empty()) throw ShapeError("stack_images: empty batch");
  const std::int64_t h = samples[0]->height, w = samples[0]->width;
  Tensor out(Shape{static_cast<std::int64_t>(samples.size()), 3, h, w});
  double* dst = out.ptr();
  for (const SegSample* s : samples) {
    if (s->height != h || s->width != w) throw ShapeError("stack_images: samples differ in size");
    std::copy(s->image.ptr(), s->image.ptr() + s->image.numel(), dst);
    dst += s->image.numel();
  }
  return out;
}

std::vector<std::uint8_t> stack_labels(std::span<const SegSample* const> samples) {
  std::vector<std::uint8_t> out;
  for (const SegSample* s : samples) out.insert(out.end(), s->label.begin(), s->label.end());
  return out;
}

void dump_pool(const std::filesystem::path& path, std::span<const SegSample> pool, int classes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  const std::int64_t h = pool.empty() ? 0 : pool[0].height;
  const std::int64_t w = pool.empty() ? 0 : pool[0].width;
  io::put_bytes(os, kPoolMagic, sizeof(kPoolMagic));
  io::put<std::uint32_t>(os, kPoolVersion);
  io::put<std::uint64_t>(os, pool.size());
  io::put<std::int64_t>(os, h);
  io::put<std::int64_t>(os, w);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(classes));
  for (const SegSample& s : pool) {
    if (s.height != h || s.width != w) throw ShapeError("dump_pool: samples differ in size");
    io::put<std::int64_t>(os, s.id);
    io::put<std::uint8_t>(os, s.coarse ? 1 : 0);
    io::put_bytes(os, s.image.ptr(), static_cast<std::size_t>(s.image.numel()) * sizeof(double));
    io::put_bytes(os, s.label.data(), s.label.size());
  }
  if (!os) throw IoError("write failed for " + path.string());
}

std::vector<SegSample> load_pool(const std::filesystem::path& path, int* classes) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[8];
  io::get_bytes(is, magic, sizeof(magic), "pool magic");
  if (!std::equal(magic, magic + 8, kPoolMagic)) throw IoError(path.string() + ": not a dataset pool file");
  if (io::get<std::uint32_t>(is, "pool version") != kPoolVersion) throw IoError(path.string() + ": unsupported version");
  const auto count = io::get<std::uint64_t>(is, "pool count");
  const auto h = io::get<std::int64_t>(is, "pool height");
  const auto w = io::get<std::int64_t>(is, "pool width");
  const auto k = io::get<std::uint32_t>(is, "pool classes");
  if (classes) *classes = static_cast<int>(k);
  if (h < 0 || w < 0 || h * w > (1 << 26)) throw IoError(path.string() + ": implausible image size");
  std::vector<SegSample> pool;
  for (std::uint64_t i = 0; i < count; ++i) {
    SegSample s;
    s.height = h;
    s.width = w;
    s.id = io::get<std::int64_t>(is, "sample id");
    s.coarse = io::get<std::uint8_t>(is, "sample flag") != 0;
    s.image = Tensor(Shape{3, h, w});
    io::get_bytes(is, s.image.ptr(), static_cast<std::size_t>(3 * h * w) * sizeof(double), "sample image");
    s.label.resize(static_cast<std::size_t>(h * w));
    io::get_bytes(is, s.label.data(), s.label.size(), "sample label");
    pool.push_back(std::move(s));
  }
  return pool;
}

}  // namespace dnas
