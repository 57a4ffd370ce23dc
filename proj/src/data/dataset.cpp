#include "ibq/data/dataset.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ibq/core/rng.hpp"

namespace ibq {
namespace {

using Rgb = std::array<double, 3>;

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double smoothstep01(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3 - 2 * x);
}

// Coverage in [0, 1] of the class motif at pixel (x, y).
double motif(int kind, double x, double y, double cx, double cy, double r, double period,
             double phase) {
  const double dx = x - cx, dy = y - cy;
  const double dist = std::hypot(dx, dy);
  const double edge = 0.75;
  auto inside = [&](double signed_dist) { return smoothstep01(0.5 - signed_dist / edge); };
  auto wave = [&](double u) { return 0.5 + 0.5 * std::sin(6.283185307179586 * u / period + phase); };
  switch (kind) {
    case 0: return inside(dist - r);
    case 1: return inside(std::fabs(dist - r) - 0.3 * r);
    case 2: return smoothstep01((wave(y) - 0.5) * 4 + 0.5);
    case 3: return smoothstep01((wave(x) - 0.5) * 4 + 0.5);
    case 4: {
      const double a = wave(x) - 0.5, b = wave(y) - 0.5;
      return smoothstep01(a * b * 16 + 0.5);
    }
    case 5: return inside(std::min(std::fabs(dx), std::fabs(dy)) - 0.3 * r) * inside(std::max(std::fabs(dx), std::fabs(dy)) - r);
    case 6: return inside(std::max(std::fabs(dx), std::fabs(dy)) - r);
    default: return smoothstep01((wave((x + y) * 0.7071067811865476) - 0.5) * 4 + 0.5);
  }
}

}  // namespace

Tensor ImageDataset::batch(const std::vector<std::int64_t>& idx) const {
  const std::int64_t per = images.numel() / images.dim(0);
  Tensor out = Tensor::zeros({static_cast<std::int64_t>(idx.size()), images.dim(1), images.dim(2),
                              images.dim(3)},
                             images.dtype());
  dispatch(images.dtype(), [&]<class T>() {
    auto src = images.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= size()) throw DataError("image index out of range");
      std::copy_n(src.begin() + idx[i] * per, per, dst.begin() + static_cast<std::int64_t>(i) * per);
    }
  });
  return out;
}

ImageDataset ImageDataset::subset(const std::vector<std::int64_t>& idx) const {
  ImageDataset d;
  d.images = batch(idx);
  d.num_classes = num_classes;
  d.source = source;
  for (std::int64_t i : idx) d.labels.push_back(labels[static_cast<std::size_t>(i)]);
  return d;
}

ImageDataset synth_generate(std::int64_t n, int size, std::uint64_t seed, int num_classes) {
  if (n < 1 || size < 1 || num_classes < 1) {
    throw ConfigError("synthetic data needs n, size and classes >= 1");
  }
  ImageDataset ds;
  ds.source = "synthetic";
  ds.num_classes = num_classes;
  ds.images = Tensor::zeros({n, 3, size, size});
  auto px = ds.images.mutable_data<float>();
  const Rng root(seed);
  const double S = size;
  for (std::int64_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % num_classes);
    ds.labels.push_back(c);
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    const double hue = static_cast<double>(c) / num_classes;
    Rgb bg = hsv(hue + rng.uniform(-0.03, 0.03), 0.65, 0.45 + rng.uniform(-0.08, 0.08));
    Rgb fg = hsv(hue + 0.5 + rng.uniform(-0.05, 0.05), 0.7 + rng.uniform(-0.1, 0.1),
                 0.9 + rng.uniform(-0.08, 0.08));
    const int kind = c % 8;
    const double cx = rng.uniform(0.3, 0.7) * S, cy = rng.uniform(0.3, 0.7) * S;
    const double r = rng.uniform(0.15, 0.32) * S;
    const double period = rng.uniform(0.15, 0.28) * S;
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const double gx = rng.uniform(-1, 1), gy = rng.uniform(-1, 1);
    const double amp = rng.uniform(0.1, 0.3);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double u = (x + 0.5) / S - 0.5, v = (y + 0.5) / S - 0.5;
        const double shade = 1.0 + amp * (gx * u + gy * v);
        const double a = motif(kind, x + 0.5, y + 0.5, cx, cy, r, period, phase);
        for (int ch = 0; ch < 3; ++ch) {
          const double value = (bg[ch] * shade) * (1 - a) + fg[ch] * a;
          px[((i * 3 + ch) * size + y) * size + x] =
              static_cast<float>(std::clamp(value * 2.0 - 1.0, -1.0, 1.0));
        }
      }
    }
  }
  return ds;
}

DatasetSplit split_dataset(const ImageDataset& ds, double val_fraction, std::uint64_t seed) {
  const std::int64_t n = ds.size();
  if (n < 2) throw DataError("dataset needs at least two images to hold out a split");
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
  }
  std::int64_t n_val = std::llround(val_fraction * static_cast<double>(n));
  n_val = std::clamp<std::int64_t>(n_val, 1, n - 1);
  std::vector<std::int64_t> val(order.begin(), order.begin() + n_val);
  std::vector<std::int64_t> train(order.begin() + n_val, order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {ds.subset(train), ds.subset(val)};
}

PpmImage parse_ppm(const std::string& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> void {
    throw DataError("PPM parse error in " + name + ": " + what);
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* field) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      fail(std::string("expected ") + field);
    }
    long long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1'000'000) fail(std::string(field) + " too large");
    }
    return static_cast<int>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') fail("missing P6 magic");
  pos = 2;
  PpmImage img;
  img.width = number("width");
  img.height = number("height");
  const int maxval = number("maxval");
  if (img.width < 1 || img.height < 1) fail("zero extent");
  if (maxval != 255) fail("maxval " + std::to_string(maxval) + " is not 255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    fail("missing whitespace after header");
  }
  ++pos;
  const std::size_t need = static_cast<std::size_t>(img.width) * img.height * 3;
  if (bytes.size() - pos < need) {
    fail("truncated pixel data (" + std::to_string(bytes.size() - pos) + " of " +
         std::to_string(need) + " bytes)");
  }
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                 bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

PpmImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_ppm(buf.str(), path.string());
}

void write_ppm(const std::filesystem::path& path, const PpmImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

PpmImage image_to_ppm(const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) {
    throw DimensionError("image_to_ppm expects [3×H×W], got " + shape_str(chw.shape()));
  }
  PpmImage img;
  img.height = static_cast<int>(chw.dim(1));
  img.width = static_cast<int>(chw.dim(2));
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  const std::int64_t plane = chw.dim(1) * chw.dim(2);
  for (std::int64_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::nearbyint((chw.value(c * plane + p) + 1.0) * 127.5);
      img.rgb[static_cast<std::size_t>(p * 3 + c)] =
          static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return img;
}

Tensor ppm_to_image(const PpmImage& img, int size) {
  if (size < 1) throw ConfigError("image size must be positive");
  const int s = std::min(img.width, img.height);
  const int ox = (img.width - s) / 2, oy = (img.height - s) / 2;
  Tensor out = Tensor::zeros({3, size, size});
  auto d = out.mutable_data<float>();
  for (int y = 0; y < size; ++y) {
    const int sy = oy + static_cast<int>(static_cast<std::int64_t>(y) * s / size);
    for (int x = 0; x < size; ++x) {
      const int sx = ox + static_cast<int>(static_cast<std::int64_t>(x) * s / size);
      const std::size_t src = (static_cast<std::size_t>(sy) * img.width + sx) * 3;
      for (int c = 0; c < 3; ++c) {
        d[(static_cast<std::size_t>(c) * size + y) * size + x] =
            static_cast<float>(img.rgb[src + c] / 127.5 - 1.0);
      }
    }
  }
  return out;
}

ImageDataset load_ppm_folder(const std::filesystem::path& path, int size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) throw DataError("data path " + path.string() + " is not a directory");
  auto ppms_in = [](const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
  };
  std::vector<std::pair<fs::path, int>> files;
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(path)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  ImageDataset ds;
  ds.source = path.string();
  if (dirs.empty()) {
    for (auto& f : ppms_in(path)) files.emplace_back(f, 0);
    ds.num_classes = 1;
  } else {
    for (std::size_t c = 0; c < dirs.size(); ++c) {
      for (auto& f : ppms_in(dirs[c])) files.emplace_back(f, static_cast<int>(c));
    }
    ds.num_classes = static_cast<int>(dirs.size());
  }
  if (files.empty()) throw DataError("no .ppm files under " + path.string());
  const std::int64_t per = 3LL * size * size;
  ds.images = Tensor::zeros({static_cast<std::int64_t>(files.size()), 3, size, size});
  auto dst = ds.images.mutable_data<float>();
  for (std::size_t i = 0; i < files.size(); ++i) {
    Tensor img = ppm_to_image(read_ppm(files[i].first), size);
    auto src = img.data<float>();
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::int64_t>(i) * per);
    ds.labels.push_back(files[i].second);
  }
  return ds;
}

}  // namespace ibq
