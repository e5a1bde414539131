#include "menet/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace menet {

namespace fs = std::filesystem;

double SampleRecord::salient_fraction() const {
  if (mask.empty()) return 0.0;
  return double(std::count(mask.begin(), mask.end(), std::uint8_t{1})) / double(mask.size());
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = {{"split", m.split}, {"ids", m.ids}, {"seed", m.seed}, {"size", m.size}, {"version", m.version}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m = DatasetManifest{};
  for (const auto& [key, v] : j.items()) {
    if (key == "split") m.split = v.get<std::string>();
    else if (key == "ids") m.ids = v.get<std::vector<std::string>>();
    else if (key == "seed") m.seed = v.get<std::uint64_t>();
    else if (key == "size") m.size = v.get<int>();
    else if (key == "version") m.version = v.get<int>();
    else throw FormatError("manifest: unknown key '" + key + "'");
  }
}

// ---------------------------------------------------------------- generator

namespace {

constexpr double kTwoPi = 2 * std::numbers::pi;

struct Shape2 {
  int kind = 0;  // 0 ellipse, 1 rectangle, 2 convex polygon
  double cx = 0, cy = 0, a = 0, b = 0, angle = 0;
  std::vector<std::pair<double, double>> poly;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
    if (kind == 0) return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    if (kind == 1) return std::abs(u) <= a && std::abs(v) <= b;
    // vertices are counter-clockwise on a circle, so inside = left of every edge
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const auto [x0, y0] = poly[i];
      const auto [x1, y1] = poly[(i + 1) % poly.size()];
      if ((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0) return false;
    }
    return true;
  }
};

Shape2 random_shape(double size, Rng& rng) {
  Shape2 s;
  s.kind = static_cast<int>(rng.uniform_int(0, 2));
  s.cx = rng.uniform(0.25, 0.75) * size;
  s.cy = rng.uniform(0.25, 0.75) * size;
  s.angle = rng.uniform(0, std::numbers::pi);
  if (s.kind == 0) {
    s.a = rng.uniform(0.1, 0.3) * size;
    s.b = rng.uniform(0.1, 0.3) * size;
  } else if (s.kind == 1) {
    s.a = rng.uniform(0.08, 0.25) * size;
    s.b = rng.uniform(0.08, 0.25) * size;
  } else {
    const int k = static_cast<int>(rng.uniform_int(5, 8));
    const double r = rng.uniform(0.15, 0.3) * size;
    std::vector<double> angles(k);
    for (auto& t : angles) t = rng.uniform(0, kTwoPi);
    std::sort(angles.begin(), angles.end());
    for (double t : angles) s.poly.push_back({s.cx + r * std::cos(t), s.cy + r * std::sin(t)});
  }
  return s;
}

/// Smooth field: a few random plane waves plus a coarse random grid,
/// bilinearly interpolated.
std::vector<double> smooth_field(int size, Rng& rng, double wave_amp, double grid_amp, int grid) {
  std::vector<double> f(std::size_t(size) * size, 0.0);
  for (int k = 0; k < 3; ++k) {
    const double fx = rng.uniform(-2, 2), fy = rng.uniform(-2, 2), phase = rng.uniform(0, kTwoPi);
    const double amp = wave_amp * rng.uniform(0.3, 1.0);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        f[y * size + x] += amp * std::cos(kTwoPi * (fx * x + fy * y) / size + phase);
  }
  std::vector<double> g(std::size_t(grid + 1) * (grid + 1));
  for (auto& v : g) v = rng.uniform(-grid_amp, grid_amp);
  const double cell = double(size) / grid;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double gx = (x + 0.5) / cell, gy = (y + 0.5) / cell;
      const int ix = std::min(int(gx), grid - 1), iy = std::min(int(gy), grid - 1);
      const double tx = gx - ix, ty = gy - iy;
      const auto at = [&](int yy, int xx) { return g[yy * (grid + 1) + xx]; };
      f[y * size + x] += (1 - ty) * ((1 - tx) * at(iy, ix) + tx * at(iy, ix + 1)) +
                         ty * ((1 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
    }
  return f;
}

// luminance plus a chroma offset of the given magnitude in a random hue
// direction (orthonormal basis of the plane perpendicular to grey)
std::array<double, 3> random_color(Rng& rng, double chroma_lo, double chroma_hi) {
  const double lum = rng.uniform(0.3, 0.7);
  const double c = rng.uniform(chroma_lo, chroma_hi), hue = rng.uniform(0, kTwoPi);
  const double u = c * std::cos(hue), v = c * std::sin(hue);
  const double s6 = std::sqrt(6.0), s2 = std::sqrt(2.0);
  return {lum + 2 * u / s6, lum - u / s6 + v / s2, lum - u / s6 - v / s2};
}

double color_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

}  // namespace

SampleRecord generate_sample(int size, Rng& rng, std::string id) {
  if (size < 8 || (size & (size - 1)) != 0) throw ContractError("generate: size must be a power of two >= 8");
  SampleRecord s;
  s.id = std::move(id);
  const std::size_t hw = std::size_t(size) * size;

  // mask: one or two shapes, redrawn until the salient fraction is in range
  for (int attempt = 0;; ++attempt) {
    std::vector<Shape2> shapes(rng.uniform_int(1, 2));
    for (auto& sh : shapes) sh = random_shape(size, rng);
    s.mask.assign(hw, 0);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        for (const auto& sh : shapes)
          if (sh.contains(x + 0.5, y + 0.5)) s.mask[y * size + x] = 1;
    const double frac = s.salient_fraction();
    if (frac >= 0.05 && frac <= 0.6) break;
    if (attempt > 1000) throw std::logic_error("generate: shape sampler failed to meet the area constraint");
  }

  // object colours lean towards higher chroma, background towards grey; the
  // chroma ranges overlap so colour alone does not separate the regions
  const auto bg = random_color(rng, 0.0, 0.2);
  auto fg = random_color(rng, 0.12, 0.35);
  while (color_distance(fg, bg) < 0.2) fg = random_color(rng, 0.12, 0.35);

  s.image = Tensor<float>({3, std::size_t(size), std::size_t(size)});
  for (int c = 0; c < 3; ++c) {
    // background: low-frequency shading plus a fine band-limited texture
    const auto bg_tex = smooth_field(size, rng, 0.08, 0.10, std::max(2, size / 4));
    const auto fg_tex = smooth_field(size, rng, 0.05, 0.03, std::max(2, size / 16));
    for (std::size_t i = 0; i < hw; ++i) {
      const double base = s.mask[i] ? fg[c] + fg_tex[i] : bg[c] + bg_tex[i];
      const double v = base + 0.03 * rng.normal();
      s.image[c * hw + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return s;
}

std::vector<SampleRecord> generate_synthetic(std::size_t n, int size, const Rng& rng) {
  if (n == 0) throw ContractError("generate: n must be >= 1");
  std::vector<SampleRecord> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Rng r = rng.split(k);
    std::ostringstream id;
    id << std::setw(5) << std::setfill('0') << k;
    out.push_back(generate_sample(size, r, id.str()));
  }
  return out;
}

// ---------------------------------------------------------------- geometry

Tensor<float> resample_bilinear(const Tensor<float>& image, double x0, double y0, double w, double h, int target) {
  if (target < 1) throw ContractError("resize: target must be >= 1");
  if (image.shape().size() < 2) throw ContractError("resize: image must have spatial dims");
  const std::size_t ih = image.shape()[image.shape().size() - 2], iw = image.shape()[image.shape().size() - 1];
  const std::size_t planes = image.size() / (ih * iw);
  Shape shape = image.shape();
  shape[shape.size() - 2] = shape[shape.size() - 1] = std::size_t(target);
  Tensor<float> out(shape);
  const double sx = w / target, sy = h / target;
  std::vector<std::size_t> xa(target), xb(target), ya(target), yb(target);
  std::vector<double> xt(target), yt(target);
  auto coords = [](double src, std::size_t n, std::size_t& a, std::size_t& b, double& t) {
    src = std::clamp(src, 0.0, double(n - 1));
    a = static_cast<std::size_t>(std::floor(src));
    b = std::min(a + 1, n - 1);
    t = src - double(a);
  };
  for (int i = 0; i < target; ++i) {
    coords(x0 + (i + 0.5) * sx - 0.5, iw, xa[i], xb[i], xt[i]);
    coords(y0 + (i + 0.5) * sy - 0.5, ih, ya[i], yb[i], yt[i]);
  }
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = image.raw() + p * ih * iw;
    float* dst = out.raw() + p * target * target;
    for (int y = 0; y < target; ++y)
      for (int x = 0; x < target; ++x) {
        const double top = (1 - xt[x]) * src[ya[y] * iw + xa[x]] + xt[x] * src[ya[y] * iw + xb[x]];
        const double bot = (1 - xt[x]) * src[yb[y] * iw + xa[x]] + xt[x] * src[yb[y] * iw + xb[x]];
        dst[y * target + x] = static_cast<float>((1 - yt[y]) * top + yt[y] * bot);
      }
  }
  return out;
}

std::vector<std::uint8_t> resample_nearest(std::span<const std::uint8_t> mask, int size, double x0, double y0,
                                           double w, double h, int target) {
  if (target < 1) throw ContractError("resize: target must be >= 1");
  if (mask.size() != std::size_t(size) * size) throw ContractError("resize: mask size mismatch");
  std::vector<std::uint8_t> out(std::size_t(target) * target);
  auto pick = [size](double src) { return std::clamp<long>(static_cast<long>(std::floor(src)), 0, size - 1); };
  for (int y = 0; y < target; ++y)
    for (int x = 0; x < target; ++x)
      out[y * target + x] = mask[pick(y0 + (y + 0.5) * h / target) * size + pick(x0 + (x + 0.5) * w / target)];
  return out;
}

Tensor<float> resize(const Tensor<float>& image, int target) {
  const std::size_t h = image.shape()[image.shape().size() - 2], w = image.shape()[image.shape().size() - 1];
  if (h == std::size_t(target) && w == std::size_t(target)) return image;
  return resample_bilinear(image, 0, 0, double(w), double(h), target);
}

std::vector<std::uint8_t> resize_mask(std::span<const std::uint8_t> mask, int size, int target) {
  if (size == target) return {mask.begin(), mask.end()};
  return resample_nearest(mask, size, 0, 0, size, size, target);
}

SampleRecord flip_horizontal(const SampleRecord& s) {
  SampleRecord out = s;
  const std::size_t n = s.size();
  const std::size_t planes = s.image.size() / (n * n);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) out.image[(p * n + y) * n + x] = s.image[(p * n + y) * n + (n - 1 - x)];
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) out.mask[y * n + x] = s.mask[y * n + (n - 1 - x)];
  return out;
}

SampleRecord augment(const SampleRecord& s, Rng& rng, const AugmentOptions& opts) {
  const SampleRecord flipped = rng.bernoulli(opts.flip_probability) ? flip_horizontal(s) : s;
  const int n = static_cast<int>(s.size());
  for (int attempt = 0; attempt < opts.max_crop_attempts; ++attempt) {
    const double scale = rng.uniform(opts.min_crop_scale, 1.0);
    const double side = scale * n;
    const double x0 = rng.uniform(0, n - side), y0 = rng.uniform(0, n - side);
    auto mask = resample_nearest(flipped.mask, n, x0, y0, side, side, n);
    const auto pos = std::count(mask.begin(), mask.end(), std::uint8_t{1});
    if (pos == 0 || pos == static_cast<long>(mask.size())) continue;
    SampleRecord out;
    out.id = s.id;
    out.image = resample_bilinear(flipped.image, x0, y0, side, side, n);
    out.mask = std::move(mask);
    return out;
  }
  return s;
}

// ---------------------------------------------------------------- netpbm

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::string& header, std::span<const std::uint8_t> payload) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << header;
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw FormatError(path.string() + ": write failed");
}

struct Netpbm {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

Netpbm parse_netpbm(const fs::path& path, const char* magic, int channels) {
  const auto bytes = read_bytes(path);
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) {
    throw FormatError(path.string() + ": " + what + " at byte offset " + std::to_string(pos));
  };
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1])
    fail(std::string("expected magic '") + magic + "'");
  pos = 2;
  auto number = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) fail("expected a decimal header field");
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1 << 20) fail("header field too large");
    }
    return static_cast<int>(v);
  };
  Netpbm img;
  img.channels = channels;
  img.width = number();
  img.height = number();
  const int maxval = number();
  if (img.width < 1 || img.height < 1) fail("zero image dimension");
  if (maxval != 255) fail("unsupported maxval " + std::to_string(maxval) + " (need 255)");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("expected whitespace after header");
  ++pos;
  const std::size_t expected = std::size_t(img.width) * img.height * channels;
  const std::size_t actual = bytes.size() - pos;
  if (actual < expected)
    throw FormatError(path.string() + ": truncated pixel data at byte offset " + std::to_string(pos) +
                      ": expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual));
  img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + expected));
  return img;
}

std::string header(const char* magic, std::size_t w, std::size_t h) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void save_image(const fs::path& path, const Tensor<float>& image) {
  if (image.shape().size() != 3 || image.dim(0) != 3) throw ContractError("save_image: expected 3 x H x W");
  const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
  std::vector<std::uint8_t> px(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) px[i * 3 + c] = quantize(image[c * hw + i]);
  write_bytes(path, header("P6", w, h), px);
}

Tensor<float> load_image(const fs::path& path) {
  const auto img = parse_netpbm(path, "P6", 3);
  const std::size_t hw = std::size_t(img.width) * img.height;
  Tensor<float> out({3, std::size_t(img.height), std::size_t(img.width)});
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) out[c * hw + i] = img.pixels[i * 3 + c] / 255.0f;
  return out;
}

void save_mask(const fs::path& path, std::span<const std::uint8_t> mask, int size) {
  if (mask.size() != std::size_t(size) * size) throw ContractError("save_mask: size mismatch");
  std::vector<std::uint8_t> px(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) px[i] = mask[i] ? 255 : 0;
  write_bytes(path, header("P5", size, size), px);
}

std::vector<std::uint8_t> load_mask(const fs::path& path, int* size) {
  const auto img = parse_netpbm(path, "P5", 1);
  if (img.width != img.height) throw FormatError(path.string() + ": mask must be square");
  if (size) *size = img.width;
  std::vector<std::uint8_t> out(img.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i] >= 128;
  return out;
}

void save_gray(const fs::path& path, std::span<const double> map, int width, int height) {
  if (map.size() != std::size_t(width) * height) throw ContractError("save_gray: size mismatch");
  std::vector<std::uint8_t> px(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) px[i] = quantize(map[i]);
  write_bytes(path, header("P5", width, height), px);
}

std::vector<double> load_gray(const fs::path& path, int* width, int* height) {
  const auto img = parse_netpbm(path, "P5", 1);
  if (width) *width = img.width;
  if (height) *height = img.height;
  std::vector<double> out(img.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i] / 255.0;
  return out;
}

void save_dataset(const fs::path& dir, const std::vector<SampleRecord>& samples, const DatasetManifest& manifest) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (const auto& s : samples) {
    save_image(dir / "images" / (s.id + ".ppm"), s.image);
    save_mask(dir / "masks" / (s.id + ".pgm"), s.mask, static_cast<int>(s.size()));
  }
  std::ofstream out(dir / "manifest.json");
  out << nlohmann::json(manifest).dump(2) << '\n';
  if (!out) throw FormatError((dir / "manifest.json").string() + ": write failed");
}

std::vector<SampleRecord> load_dataset(const fs::path& dir, DatasetManifest* manifest) {
  const auto mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw FormatError(mpath.string() + ": cannot open");
  DatasetManifest m;
  try {
    m = nlohmann::json::parse(in).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  std::vector<SampleRecord> out;
  for (const auto& id : m.ids) {
    SampleRecord s;
    s.id = id;
    s.image = load_image(dir / "images" / (id + ".ppm"));
    int size = 0;
    s.mask = load_mask(dir / "masks" / (id + ".pgm"), &size);
    if (s.image.dim(1) != std::size_t(size) || s.image.dim(2) != std::size_t(size))
      throw FormatError((dir / "masks" / (id + ".pgm")).string() + ": mask is " + std::to_string(size) + "x" +
                        std::to_string(size) + " but image is " + std::to_string(s.image.dim(2)) + "x" +
                        std::to_string(s.image.dim(1)));
    out.push_back(std::move(s));
  }
  if (manifest) *manifest = m;
  return out;
}

Tensor<float> stack_images(std::span<const SampleRecord> samples) {
  if (samples.empty()) throw ContractError("stack_images: empty batch");
  const auto& s0 = samples[0].image.shape();
  Tensor<float> out({samples.size(), s0[0], s0[1], s0[2]});
  const std::size_t per = samples[0].image.size();
  for (std::size_t n = 0; n < samples.size(); ++n) {
    if (samples[n].image.shape() != s0) throw ContractError("stack_images: mixed image sizes");
    std::copy(samples[n].image.raw(), samples[n].image.raw() + per, out.raw() + n * per);
  }
  return out;
}

std::vector<std::uint8_t> stack_masks(std::span<const SampleRecord> samples) {
  std::vector<std::uint8_t> out;
  for (const auto& s : samples) out.insert(out.end(), s.mask.begin(), s.mask.end());
  return out;
}

}  // namespace menet
