#include "svdnas/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "svdnas/io.hpp"
#include "svdnas/random.hpp"

namespace svdnas {

NdArray<float> Dataset::batch_images(Index start, Index count) const {
  const Index per = images.numel() / std::max<Index>(size(), 1);
  return NdArray<float>({count, images.dim(1), images.dim(2), images.dim(3)},
                        VectorX<float>(images.data().segment(start * per, count * per)));
}

std::vector<int> Dataset::batch_labels(Index start, Index count) const {
  if (labels.empty()) return {};
  return {labels.begin() + start, labels.begin() + start + count};
}

Dataset Dataset::subset(const std::vector<Index>& indices) const {
  const Index per = images.numel() / std::max<Index>(size(), 1);
  Dataset out{NdArray<float>({static_cast<Index>(indices.size()), images.dim(1), images.dim(2), images.dim(3)}), {}};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= size()) throw ContractError("dataset subset index out of range");
    out.images.data().segment(i * per, per) = images.data().segment(indices[i] * per, per);
    if (!labels.empty()) out.labels.push_back(labels[indices[i]]);
  }
  return out;
}

Dataset Dataset::slice(Index start, Index count) const {
  if (start < 0 || count < 0 || start + count > size()) throw ContractError("dataset slice out of range");
  return {batch_images(start, count), batch_labels(start, count)};
}

namespace {

constexpr int kSuper = 4;

struct Style {
  std::array<float, 3> fg, bg;
  double cx, cy, size, phase;
  int variant;
};

double luminance(const std::array<float, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

// Coverage in [0, 1] of the class shape at continuous point (x, y) in pixel units.
double shape_value(int cls, const Style& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (cls) {
    case 0:  // disk
      return dx * dx + dy * dy <= s.size * s.size ? 1.0 : 0.0;
    case 1:  // square
      return std::abs(dx) <= s.size * 0.85 && std::abs(dy) <= s.size * 0.85 ? 1.0 : 0.0;
    case 2: {  // cross
      const double arm = 1.0 + 0.2 * s.size, len = s.size + 1.0;
      return (std::abs(dx) <= arm * 0.5 && std::abs(dy) <= len) || (std::abs(dy) <= arm * 0.5 && std::abs(dx) <= len)
                 ? 1.0
                 : 0.0;
    }
    case 3: {  // ring
      const double r = std::sqrt(dx * dx + dy * dy);
      return r <= s.size + 0.5 && r >= s.size - 1.5 ? 1.0 : 0.0;
    }
    case 4:  // horizontal stripes
      return std::fmod(y + s.phase + 64.0, 4.0) < 2.0 ? 1.0 : 0.0;
    case 5:  // vertical stripes
      return std::fmod(x + s.phase + 64.0, 4.0) < 2.0 ? 1.0 : 0.0;
    case 6:  // horizontal gradient
      return std::clamp(s.variant ? x / 16.0 : 1.0 - x / 16.0, 0.0, 1.0);
    case 7:  // vertical gradient
      return std::clamp(s.variant ? y / 16.0 : 1.0 - y / 16.0, 0.0, 1.0);
    case 8: {  // L-shaped bracket in one corner
      const double ox = (s.variant & 1) ? 16.0 - x : x, oy = (s.variant & 2) ? 16.0 - y : y;
      const double m = 1.5 + s.phase * 0.25, len = 7.0 + s.size * 0.5;
      return (ox >= m && ox <= m + 2.5 && oy >= m && oy <= len) || (oy >= m && oy <= m + 2.5 && ox >= m && ox <= len)
                 ? 1.0
                 : 0.0;
    }
    default: {  // diagonal quadrant checker
      const bool right = x >= s.cx, bottom = y >= s.cy;
      return (right == bottom) != static_cast<bool>(s.variant & 1) ? 1.0 : 0.0;
    }
  }
}

void render(int cls, Rng& rng, float* out) {
  Style s{};
  do {
    for (int c = 0; c < 3; ++c) {
      s.fg[c] = static_cast<float>(rng.uniform());
      s.bg[c] = static_cast<float>(rng.uniform());
    }
  } while (std::abs(luminance(s.fg) - luminance(s.bg)) < 0.25);
  s.cx = 8.0 + rng.uniform(-2.5, 2.5);
  s.cy = 8.0 + rng.uniform(-2.5, 2.5);
  s.size = rng.uniform(3.0, 5.5);
  s.phase = rng.uniform(0.0, 4.0);
  s.variant = static_cast<int>(rng.uniform_index(4));
  const double noise = 0.06;
  for (Index py = 0; py < kImageSize; ++py)
    for (Index px = 0; px < kImageSize; ++px) {
      double cover = 0.0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx)
          cover += shape_value(cls, s, px + (sx + 0.5) / kSuper, py + (sy + 0.5) / kSuper);
      cover /= kSuper * kSuper;
      for (int c = 0; c < 3; ++c) {
        const double v = cover * s.fg[c] + (1.0 - cover) * s.bg[c] + noise * rng.normal();
        out[(c * kImageSize + py) * kImageSize + px] = static_cast<float>(v);
      }
    }
}

Dataset render_split(Index count, Rng& rng) {
  const Index per = 3 * kImageSize * kImageSize;
  Dataset d{NdArray<float>({count, 3, kImageSize, kImageSize}), std::vector<int>(count)};
  // Exact balance: labels cycle through classes, then a seeded shuffle.
  for (Index i = 0; i < count; ++i) d.labels[i] = static_cast<int>(i % kDatasetClasses);
  for (Index i = count - 1; i > 0; --i) std::swap(d.labels[i], d.labels[rng.uniform_index(i + 1)]);
  for (Index i = 0; i < count; ++i) render(d.labels[i], rng, d.images.ptr() + i * per);
  return d;
}

}  // namespace

std::vector<Index> sample_indices(Index n, Index count, std::uint64_t seed) {
  if (count > n) throw ContractError("sample_indices: count exceeds population");
  Rng rng(seed);
  std::vector<Index> all(n);
  std::iota(all.begin(), all.end(), Index{0});
  for (Index i = 0; i < count; ++i) std::swap(all[i], all[i + rng.uniform_index(n - i)]);
  all.resize(count);
  return all;
}

ProceduralDataset generate_dataset(std::uint64_t seed, Index train_size, Index validation_size) {
  ProceduralDataset p;
  p.seed = seed;
  Rng rng(seed);
  Rng train_rng = rng.fork(), val_rng = rng.fork();
  p.train = render_split(train_size, train_rng);
  p.validation = render_split(validation_size, val_rng);

  const Index hw = kImageSize * kImageSize;
  p.channel_mean.assign(3, 0.f);
  p.channel_std.assign(3, 1.f);
  for (Index c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (Index n = 0; n < train_size; ++n) {
      auto v = p.train.images.data().segment((n * 3 + c) * hw, hw).cast<double>();
      s += v.sum();
      ss += v.square().sum();
    }
    const double m = s / static_cast<double>(train_size * hw);
    const double var = ss / static_cast<double>(train_size * hw) - m * m;
    p.channel_mean[c] = static_cast<float>(m);
    p.channel_std[c] = static_cast<float>(std::sqrt(std::max(var, 1e-12)));
  }
  for (Dataset* d : {&p.train, &p.validation})
    for (Index n = 0; n < d->size(); ++n)
      for (Index c = 0; c < 3; ++c) {
        auto v = d->images.data().segment((n * 3 + c) * hw, hw);
        v = (v - p.channel_mean[c]) / p.channel_std[c];
      }
  p.few_sample = sample_indices(train_size, std::min(kFewSampleSize, train_size), seed ^ 0xf5a3ULL);
  return p;
}

void save_dataset(const Dataset& d, const std::string& path, const std::string& extra_json) {
  Json j;
  j["count"] = d.size();
  j["shape"] = d.image_shape();
  j["labelled"] = d.labelled();
  j["blob"] = "float32-le NCHW";
  j["meta"] = Json::parse(extra_json);
  write_json(path, j);
  write_f32(path + ".bin", std::vector<float>(d.images.ptr(), d.images.ptr() + d.images.numel()));
  if (d.labelled()) write_i32(path + ".labels", std::vector<std::int32_t>(d.labels.begin(), d.labels.end()));
}

Dataset load_dataset(const std::string& path) {
  const Json j = read_json(path);
  try {
    const Index count = j.at("count").get<Index>();
    const Shape shape = j.at("shape").get<Shape>();
    if (count < 0 || shape.size() != 3) throw IoError("bad dataset header", path);
    Shape full{count, shape[0], shape[1], shape[2]};
    const auto values = read_f32(path + ".bin", static_cast<std::size_t>(shape_numel(full)));
    Dataset d{NdArray<float>(full, values), {}};
    if (j.at("labelled").get<bool>()) {
      const auto labels = read_i32(path + ".labels", static_cast<std::size_t>(count));
      d.labels.assign(labels.begin(), labels.end());
    }
    return d;
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed dataset manifest (") + e.what() + ")", path);
  }
}

}  // namespace svdnas
