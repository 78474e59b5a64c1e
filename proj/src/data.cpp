#include "lwf/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lwf/binary_io.hpp"
#include "lwf/errors.hpp"

namespace lwf {

namespace {

constexpr std::uint32_t kCorpusVersion = 1;
constexpr char kCorpusMagic[] = "CLDS";

struct Rgb {
  double r, g, b;
};

constexpr Rgb kBackground{0.28, 0.34, 0.46};
constexpr Rgb kConcrete{0.62, 0.60, 0.57};
constexpr Rgb kCrack{0.10, 0.09, 0.09};
constexpr Rgb kSpall{0.90, 0.88, 0.84};
constexpr Rgb kRust{0.66, 0.38, 0.18};

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

double segment_distance(double px, double py, const CrackStroke& s) {
  const double dx = std::cos(deg2rad(s.angle_deg)) * s.length * 0.5;
  const double dy = std::sin(deg2rad(s.angle_deg)) * s.length * 0.5;
  const double ax = s.cx - dx, ay = s.cy - dy;
  const double vx = 2 * dx, vy = 2 * dy;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * vx - px, qy = ay + t * vy - py;
  return std::sqrt(qx * qx + qy * qy);
}

// Length of the member's long axis in pixels.
double extent_along(std::uint8_t component, std::size_t height, std::size_t width) {
  return static_cast<double>(component == kBeam ? width : height);
}

bool inside_blob(double px, double py, const Blob& b) {
  const double dx = px - b.cx, dy = py - b.cy;
  const double r = std::sqrt(dx * dx + dy * dy);
  const double theta = std::atan2(dy, dx);
  return r <= b.radius * (1.0 + 0.25 * std::sin(3.0 * theta + b.phase));
}

}  // namespace

const std::vector<TaskSpec>& task_catalog() {
  static const std::vector<TaskSpec> catalog{
      {1, "damage_level", {"undamaged", "minor", "heavy"}, true},
      {2, "spalling", {"yes", "no"}, true},
      {3, "component", {"column", "wall", "beam"}, false},
      {4, "damage_type", {"shear", "flexural", "ASR", "corrosion"}, true},
  };
  return catalog;
}

const TaskSpec& task_spec(int task_id) {
  if (task_id < 1 || task_id > kTaskCount) {
    throw ConfigError("unknown task id " + std::to_string(task_id));
  }
  return task_catalog()[static_cast<std::size_t>(task_id - 1)];
}

CorpusSizes CorpusSizes::uniform(std::size_t train, std::size_t test) {
  CorpusSizes s;
  s.train.fill(train);
  s.test.fill(test);
  return s;
}

bool DatasetSplit::has_task(int task_id) const {
  return std::any_of(tasks.begin(), tasks.end(), [&](const TaskData& t) { return t.task_id == task_id; });
}

const TaskData& DatasetSplit::task(int task_id) const {
  for (const TaskData& t : tasks) {
    if (t.task_id == task_id) return t;
  }
  throw DataError("corpus has no data for task " + std::to_string(task_id));
}

// ---------------------------------------------------------------------------
// Generation

namespace {

// Low-discrepancy walk over the cumulative class weights.
std::size_t weighted_class(std::size_t index, std::size_t k, double imbalance) {
  std::vector<double> cumulative(k);
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    total += std::pow(imbalance, -static_cast<double>(c) / static_cast<double>(k - 1));
    cumulative[c] = total;
  }
  const double golden = 0.6180339887498949;
  const double u = std::fmod((static_cast<double>(index) + 0.5) * golden, 1.0) * total;
  for (std::size_t c = 0; c < k; ++c) {
    if (u < cumulative[c]) return c;
  }
  return k - 1;
}

}  // namespace

AttributeLabels sample_labels(int task_id, std::size_t index, Rng& rng, double imbalance) {
  if (!(imbalance >= 1.0)) throw ConfigError("class imbalance must be >= 1");
  const TaskSpec& spec = task_spec(task_id);
  AttributeLabels l{};
  l[0] = static_cast<std::uint8_t>(task_id == 4 ? 1 + rng.below(2) : rng.below(3));
  l[1] = static_cast<std::uint8_t>(rng.below(2));
  l[2] = static_cast<std::uint8_t>(rng.below(3));
  l[3] = static_cast<std::uint8_t>(rng.below(4));
  const std::size_t k = spec.class_count();
  l[static_cast<std::size_t>(task_id - 1)] =
      static_cast<std::uint8_t>(imbalance == 1.0 ? index % k : weighted_class(index, k, imbalance));
  return l;
}

SampleRecipe draw_recipe(const AttributeLabels& labels, std::size_t height, std::size_t width, Rng& rng) {
  SampleRecipe r;
  r.labels = labels;
  const double size = static_cast<double>(std::min(height, width));
  const auto level = labels[0];
  const auto component = labels[2];
  const auto dtype = labels[3];

  const double extent = component == kBeam ? static_cast<double>(height) : static_cast<double>(width);
  r.member_center = extent * rng.uniform(0.42, 0.58);
  r.member_half_width = size * rng.uniform(0.20, 0.26);

  auto point_in_member = [&](double& x, double& y) {
    x = rng.uniform(0.0, static_cast<double>(width));
    y = rng.uniform(0.0, static_cast<double>(height));
    const double offset = rng.uniform(-0.8, 0.8) * r.member_half_width;
    if (component == kColumn) x = r.member_center + offset;
    if (component == kBeam) y = r.member_center + offset;
  };
  // Axis of the member in degrees (0 = horizontal).
  const double member_axis = component == kBeam ? 0.0 : 90.0;

  if (level != kUndamaged) {
    const bool heavy = level == kHeavy;
    const int base = heavy ? 5 : 3;
    const double length = size * (heavy ? 0.55 : 0.45);
    const double crack_width = heavy ? 2.0 : 1.5;
    int count = base;
    if (dtype == kAsr) count = base * 4;
    if (dtype == kCorrosion) count = std::max(1, base / 2);
    // Flexural cracks form an evenly spaced parallel set along the member.
    const double ladder_angle = member_axis + 90.0 + rng.uniform(-4.0, 4.0);
    const double ladder_start = rng.uniform(0.15, 0.3) * extent_along(component, height, width);
    const double ladder_step = 0.6 * extent_along(component, height, width) / count;
    for (int i = 0; i < count; ++i) {
      CrackStroke s{};
      point_in_member(s.cx, s.cy);
      if (dtype == kFlexural) {
        const double along = ladder_start + ladder_step * i;
        if (component == kBeam) {
          s.cx = along;
        } else {
          s.cy = along;
        }
      }
      s.width = crack_width;
      s.length = length;
      switch (dtype) {
        case kShear:
          s.angle_deg = (rng.bernoulli(0.5) ? 45.0 : -45.0) + rng.uniform(-8.0, 8.0);
          break;
        case kFlexural:
          s.angle_deg = ladder_angle + rng.uniform(-2.0, 2.0);
          break;
        case kAsr:
          s.angle_deg = rng.uniform(0.0, 180.0);
          s.length = length * 0.3;
          s.width = heavy ? 1.5 : 1.0;
          break;
        default:
          s.angle_deg = member_axis + rng.uniform(-5.0, 5.0);
          break;
      }
      r.cracks.push_back(s);
    }
    if (dtype == kCorrosion) {
      const int stains = 2 + static_cast<int>(level);
      for (int i = 0; i < stains; ++i) {
        Blob b{};
        point_in_member(b.cx, b.cy);
        b.radius = size * rng.uniform(0.15, 0.25);
        b.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        r.rust_stains.push_back(b);
      }
    }
  }

  if (labels[1] == kSpallingYes) {
    const int blobs = 1 + static_cast<int>(rng.below(3));
    for (int i = 0; i < blobs; ++i) {
      Blob b{};
      point_in_member(b.cx, b.cy);
      b.radius = size * rng.uniform(0.09, 0.15);
      b.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      r.spall_blobs.push_back(b);
    }
  }
  r.noise_std = 0.02 + 0.015 * static_cast<double>(level);
  return r;
}

Tensor render_recipe(const SampleRecipe& recipe, std::size_t height, std::size_t width, Rng& rng) {
  const std::size_t plane = height * width;
  Tensor img({3, height, width});
  const auto component = recipe.labels[2];
  const double tone = rng.uniform(-0.04, 0.04);
  const Rgb member{kConcrete.r + tone, kConcrete.g + tone, kConcrete.b + tone};
  const double bg_tone = rng.uniform(-0.05, 0.05);

  auto blend = [&](std::size_t idx, const Rgb& c, double w) {
    img[idx] = (1 - w) * img[idx] + w * c.r;
    img[plane + idx] = (1 - w) * img[plane + idx] + w * c.g;
    img[2 * plane + idx] = (1 - w) * img[2 * plane + idx] + w * c.b;
  };

  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t idx = y * width + x;
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      bool in_member = true;
      if (component == kColumn) in_member = std::abs(px - recipe.member_center) <= recipe.member_half_width;
      if (component == kBeam) in_member = std::abs(py - recipe.member_center) <= recipe.member_half_width;

      const double shared = recipe.noise_std * rng.normal();
      if (!in_member) {
        img[idx] = kBackground.r + bg_tone + shared;
        img[plane + idx] = kBackground.g + bg_tone + shared;
        img[2 * plane + idx] = kBackground.b + bg_tone + shared;
        continue;
      }
      img[idx] = member.r + shared;
      img[plane + idx] = member.g + shared;
      img[2 * plane + idx] = member.b + shared;

      for (const Blob& b : recipe.rust_stains) {
        const double d = std::hypot(px - b.cx, py - b.cy);
        if (d < b.radius) blend(idx, kRust, 0.95 * std::sqrt(1.0 - d / b.radius));
      }
      for (const CrackStroke& s : recipe.cracks) {
        if (segment_distance(px, py, s) <= s.width * 0.5 + 0.25) {
          blend(idx, kCrack, 0.9);
        }
      }
      for (const Blob& b : recipe.spall_blobs) {
        if (inside_blob(px, py, b)) {
          blend(idx, kSpall, 0.9);
        }
      }
    }
  }
  for (double& v : img.data()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

DatasetSplit generate_corpus(std::uint64_t seed, const CorpusSizes& sizes, std::size_t height,
                             std::size_t width) {
  if (height < 8 || width < 8) {
    throw ConfigError("corpus images must be at least 8×8");
  }
  if (!(sizes.imbalance >= 1.0)) throw ConfigError("class imbalance must be >= 1");
  DatasetSplit corpus;
  corpus.seed = seed;
  corpus.height = height;
  corpus.width = width;
  const Rng root(seed);
  for (int t = 1; t <= kTaskCount; ++t) {
    const std::size_t n_train = sizes.train[static_cast<std::size_t>(t - 1)];
    const std::size_t n_test = sizes.test[static_cast<std::size_t>(t - 1)];
    if (n_train == 0 || n_test == 0) {
      throw ConfigError("corpus sizes must be positive (task " + std::to_string(t) + ")");
    }
    TaskData data;
    data.task_id = t;
    for (std::uint64_t split = 0; split < 2; ++split) {
      auto& out = split == 0 ? data.train : data.test;
      const std::size_t n = split == 0 ? n_train : n_test;
      out.reserve(n);
      const Rng split_rng = root.derive(static_cast<std::uint64_t>(t)).derive(split);
      for (std::size_t i = 0; i < n; ++i) {
        Rng rng = split_rng.derive(i);
        LabeledSample s;
        s.labels = sample_labels(t, i, rng, sizes.imbalance);
        const SampleRecipe recipe = draw_recipe(s.labels, height, width, rng);
        s.image = render_recipe(recipe, height, width, rng);
        out.push_back(std::move(s));
      }
    }
    corpus.tasks.push_back(std::move(data));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentConfig AugmentConfig::for_task(const TaskSpec& task) {
  AugmentConfig c;
  c.rotation = task.rotation_allowed;
  return c;
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.horizontal_flip = c.vertical_flip = c.rotation = false;
  c.color_jitter = 0.0;
  return c;
}

Tensor flip_horizontal(const Tensor& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

Tensor flip_vertical(const Tensor& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + (h - 1 - y)) * w + x];
  return out;
}

Tensor rotate(const Tensor& image, double degrees) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  const double a = deg2rad(degrees);
  const double ca = std::cos(a), sa = std::sin(a);
  const double cx = (static_cast<double>(w) - 1) * 0.5, cy = (static_cast<double>(h) - 1) * 0.5;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = std::clamp(ca * dx + sa * dy + cx, 0.0, static_cast<double>(w - 1));
      const double sy = std::clamp(-sa * dx + ca * dy + cy, 0.0, static_cast<double>(h - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const auto y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto at = [&](std::size_t yy, std::size_t xx) { return image[(ch * h + yy) * w + xx]; };
        out[(ch * h + y) * w + x] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                    fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
    }
  }
  return out;
}

LabeledSample augment(const LabeledSample& sample, const AugmentConfig& config, Rng& rng, AugmentStats* stats) {
  LabeledSample out = sample;
  if (stats) ++stats->calls;
  // Draws happen unconditionally so one config change does not shift the others.
  const bool hflip = rng.bernoulli(0.5);
  const bool vflip = rng.bernoulli(0.5);
  const bool rot = rng.bernoulli(0.5);
  const double angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg);
  double jitter[3];
  for (double& j : jitter) j = rng.uniform(-1.0, 1.0) * config.color_jitter;

  if (config.horizontal_flip && hflip) {
    out.image = flip_horizontal(out.image);
    if (stats) ++stats->horizontal_flips;
  }
  if (config.vertical_flip && vflip) {
    out.image = flip_vertical(out.image);
    if (stats) ++stats->vertical_flips;
  }
  if (config.rotation && rot && config.max_rotation_deg > 0.0) {
    out.image = rotate(out.image, angle);
    if (stats) ++stats->rotations;
  }
  if (config.color_jitter > 0.0) {
    const std::size_t plane = out.image.numel() / out.image.dim(0);
    for (std::size_t ch = 0; ch < out.image.dim(0); ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        double& v = out.image[ch * plane + i];
        v = std::clamp(v + jitter[ch % 3], 0.0, 1.0);
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

namespace {

Batch assemble(const std::vector<const LabeledSample*>& picked, int task_id) {
  const std::size_t k = task_spec(task_id).class_count();
  const Shape& ishape = picked.front()->image.shape();
  const std::size_t per = picked.front()->image.numel();
  Batch b;
  b.images = Tensor({picked.size(), ishape[0], ishape[1], ishape[2]});
  b.onehot = Tensor({picked.size(), k}, 0.0);
  for (std::size_t i = 0; i < picked.size(); ++i) {
    auto src = picked[i]->image.data();
    std::copy(src.begin(), src.end(), b.images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    const std::size_t label = picked[i]->label(task_id);
    b.onehot[i * k + label] = 1.0;
    b.labels.push_back(label);
  }
  return b;
}

}  // namespace

Batch make_batch(const std::vector<LabeledSample>& samples, int task_id, std::size_t first, std::size_t count) {
  if (count == 0 || first + count > samples.size()) {
    throw DataError("make_batch: range outside split");
  }
  std::vector<const LabeledSample*> picked;
  for (std::size_t i = first; i < first + count; ++i) picked.push_back(&samples[i]);
  Batch b = assemble(picked, task_id);
  for (std::size_t i = first; i < first + count; ++i) b.indices.push_back(i);
  return b;
}

std::vector<Batch> batch_iter(const std::vector<LabeledSample>& samples, int task_id, std::size_t batch_size,
                              std::uint64_t epoch_seed, const AugmentConfig* augment_config,
                              AugmentStats* stats) {
  if (batch_size == 0) {
    throw ContractError("batch_iter: batch_size must be at least 1");
  }
  if (samples.empty()) {
    throw DataError("batch_iter: empty split for task " + std::to_string(task_id));
  }
  const Rng epoch_rng(epoch_seed);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle = epoch_rng.derive(1);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[shuffle.below(i)]);
  }
  const Rng aug_root = epoch_rng.derive(2);

  std::vector<Batch> batches;
  std::vector<LabeledSample> augmented;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<const LabeledSample*> picked;
    augmented.clear();
    augmented.reserve(end - start);
    for (std::size_t pos = start; pos < end; ++pos) {
      const LabeledSample& s = samples[order[pos]];
      if (augment_config != nullptr) {
        Rng r = aug_root.derive(pos);
        augmented.push_back(augment(s, *augment_config, r, stats));
      }
    }
    for (std::size_t pos = start; pos < end; ++pos) {
      picked.push_back(augment_config ? &augmented[pos - start] : &samples[order[pos]]);
    }
    Batch b = assemble(picked, task_id);
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// CLDS files

void save_corpus(const DatasetSplit& corpus, const std::filesystem::path& path) {
  ByteWriter w;
  w.put_bytes(std::string_view(kCorpusMagic, 4));
  w.put_u32(kCorpusVersion);
  w.put_u64(corpus.seed);
  w.put_u32(static_cast<std::uint32_t>(corpus.tasks.size()));
  w.put_u32(static_cast<std::uint32_t>(corpus.channels));
  w.put_u32(static_cast<std::uint32_t>(corpus.height));
  w.put_u32(static_cast<std::uint32_t>(corpus.width));
  for (const TaskData& t : corpus.tasks) {
    w.put_u32(static_cast<std::uint32_t>(t.task_id));
    w.put_u64(t.train.size());
    w.put_u64(t.test.size());
  }
  for (const TaskData& t : corpus.tasks) {
    for (const auto* split : {&t.train, &t.test}) {
      for (const LabeledSample& s : *split) {
        w.put_f64s(s.image.data());
        for (std::uint8_t l : s.labels) w.put_u8(l);
      }
    }
  }
  w.put_u64(fnv1a64(w.bytes()));
  write_file_atomic(path, w.bytes());
}

DatasetSplit load_corpus(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  ByteReader r(bytes);
  if (bytes.size() < 4 || r.get_bytes(4) != std::string_view(kCorpusMagic, 4)) {
    throw FormatError(path.string() + ": not a CLDS corpus file");
  }
  const std::uint32_t version = r.get_u32();
  if (version != kCorpusVersion) {
    throw VersionError(path.string() + ": unsupported corpus version " + std::to_string(version));
  }
  if (bytes.size() < 8 + 4) {
    throw IntegrityError(path.string() + ": truncated");
  }
  const std::uint64_t stored = ByteReader(std::span(bytes).subspan(bytes.size() - 8)).get_u64();
  if (stored != fnv1a64(std::span(bytes).first(bytes.size() - 8))) {
    throw IntegrityError(path.string() + ": checksum mismatch (truncated or corrupted)");
  }
  DatasetSplit corpus;
  corpus.seed = r.get_u64();
  const std::uint32_t n_tasks = r.get_u32();
  corpus.channels = r.get_u32();
  corpus.height = r.get_u32();
  corpus.width = r.get_u32();
  std::vector<std::pair<std::uint64_t, std::uint64_t>> counts;
  for (std::uint32_t i = 0; i < n_tasks; ++i) {
    TaskData t;
    t.task_id = static_cast<int>(r.get_u32());
    task_spec(t.task_id);
    const std::uint64_t n_train = r.get_u64(), n_test = r.get_u64();
    counts.emplace_back(n_train, n_test);
    corpus.tasks.push_back(std::move(t));
  }
  const std::size_t per = corpus.channels * corpus.height * corpus.width;
  for (std::size_t i = 0; i < corpus.tasks.size(); ++i) {
    for (int split = 0; split < 2; ++split) {
      auto& out = split == 0 ? corpus.tasks[i].train : corpus.tasks[i].test;
      const std::uint64_t n = split == 0 ? counts[i].first : counts[i].second;
      if (n * (8 * per + kTaskCount) > r.remaining()) {
        throw IntegrityError(path.string() + ": sample count exceeds file size");
      }
      out.reserve(n);
      for (std::uint64_t k = 0; k < n; ++k) {
        LabeledSample s;
        s.image = Tensor({corpus.channels, corpus.height, corpus.width});
        r.get_f64s(s.image.data());
        for (auto& l : s.labels) l = r.get_u8();
        out.push_back(std::move(s));
      }
    }
  }
  if (r.remaining() != 8) {
    throw IntegrityError(path.string() + ": trailing bytes after samples");
  }
  return corpus;
}

}  // namespace lwf
