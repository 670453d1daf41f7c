#include "morph/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "morph/errors.hpp"
#include "morph/image.hpp"
#include "morph/rng.hpp"

namespace morph {

namespace fs = std::filesystem;

namespace {

struct Color {
  double r, g, b;
};

Color random_color(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

// One identity = one parameter bundle; all fields in pixel units or [0,255].
struct IdentityParams {
  Color background, skin, eye, pupil, mouth, brow;
  double face_rx, face_ry;
  double eye_dx, eye_y, eye_r;
  double pupil_r;
  double brow_w, brow_h, brow_y;
  double nose_w, nose_h;
  double mouth_w, mouth_h, mouth_y;
};

IdentityParams sample_identity(Rng& rng) {
  IdentityParams p;
  p.background = random_color(rng, 10, 120);
  p.skin = random_color(rng, 90, 230);
  p.eye = random_color(rng, 130, 250);
  p.pupil = random_color(rng, 0, 70);
  p.mouth = random_color(rng, 60, 220);
  p.brow = random_color(rng, 0, 110);
  p.face_rx = rng.uniform(30, 46);
  p.face_ry = rng.uniform(38, 52);
  p.eye_dx = rng.uniform(12, 22);
  p.eye_y = rng.uniform(-18, -6);
  p.eye_r = rng.uniform(4, 9);
  p.pupil_r = p.eye_r * rng.uniform(0.35, 0.6);
  p.brow_w = rng.uniform(8, 16);
  p.brow_h = rng.uniform(2, 5);
  p.brow_y = p.eye_y - p.eye_r - rng.uniform(3, 8);
  p.nose_w = rng.uniform(3, 8);
  p.nose_h = rng.uniform(8, 18);
  p.mouth_w = rng.uniform(10, 24);
  p.mouth_h = rng.uniform(3, 9);
  p.mouth_y = rng.uniform(18, 32);
  return p;
}

bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

Rgb8Image render(const IdentityParams& p, Rng& rng) {
  const double cx0 = kFaceSize / 2.0, cy0 = kFaceSize / 2.0;
  double dx = rng.uniform(-4.0, 4.0);
  double dy = rng.uniform(-4.0, 4.0);
  double brightness = rng.uniform(0.9, 1.1);
  double scale = rng.uniform(0.95, 1.05);
  double cx = cx0 + dx, cy = cy0 + dy;

  Rgb8Image img;
  img.width = kFaceSize;
  img.height = kFaceSize;
  img.rgb.resize(static_cast<std::size_t>(kFaceSize) * kFaceSize * 3);

  for (int y = 0; y < kFaceSize; ++y) {
    for (int x = 0; x < kFaceSize; ++x) {
      Color c = p.background;
      double fx = x, fy = y;
      if (in_ellipse(fx, fy, cx, cy, p.face_rx * scale, p.face_ry * scale)) {
        c = p.skin;
        for (int side = -1; side <= 1; side += 2) {
          double ex = cx + side * p.eye_dx * scale, ey = cy + p.eye_y * scale;
          if (in_ellipse(fx, fy, ex, ey, p.eye_r, p.eye_r * 0.8)) c = p.eye;
          if (in_ellipse(fx, fy, ex, ey, p.pupil_r, p.pupil_r)) c = p.pupil;
          if (std::abs(fx - ex) <= p.brow_w / 2 &&
              std::abs(fy - (cy + p.brow_y * scale)) <= p.brow_h / 2)
            c = p.brow;
        }
        if (std::abs(fx - cx) <= p.nose_w / 2 && fy >= cy &&
            fy <= cy + p.nose_h * scale)
          c = Color{p.skin.r * 0.75, p.skin.g * 0.75, p.skin.b * 0.75};
        if (in_ellipse(fx, fy, cx, cy + p.mouth_y * scale, p.mouth_w * scale,
                       p.mouth_h))
          c = p.mouth;
      }
      double noise = rng.normal(0.0, 4.0);
      auto emit = [&](double v) {
        double out = v * brightness + noise;
        return static_cast<unsigned char>(std::min(255.0, std::max(0.0, std::round(out))));
      };
      std::size_t base = (static_cast<std::size_t>(y) * kFaceSize + x) * 3;
      img.rgb[base + 0] = emit(c.r);
      img.rgb[base + 1] = emit(c.g);
      img.rgb[base + 2] = emit(c.b);
    }
  }
  return img;
}

}  // namespace

DatasetIndex generate_synthetic_faces(const fs::path& out_dir, int n_identities,
                                      int images_per_identity, std::uint64_t seed) {
  if (n_identities < 2)
    throw ConfigError("synth: need at least 2 identities, got " +
                      std::to_string(n_identities));
  if (images_per_identity < 1)
    throw ConfigError("synth: images_per_identity must be positive");
  fs::create_directories(out_dir);

  DatasetIndex index;
  index.root = out_dir;
  Rng root(seed);
  char name[64];
  for (int id = 0; id < n_identities; ++id) {
    std::snprintf(name, sizeof name, "id_%03d", id);
    fs::create_directories(out_dir / name);
    Rng id_rng = root.split(static_cast<std::uint64_t>(id));
    IdentityParams params = sample_identity(id_rng);
    DatasetIndex::Identity ident;
    ident.id = name;
    for (int i = 0; i < images_per_identity; ++i) {
      char img_name[64];
      std::snprintf(img_name, sizeof img_name, "img_%03d.png", i);
      Rng img_rng = id_rng.split(static_cast<std::uint64_t>(i) + 1);
      Rgb8Image img = render(params, img_rng);
      fs::path rel = fs::path(name) / img_name;
      save_png_rgb8(out_dir / rel, img);
      ident.images.push_back(rel.generic_string());
    }
    index.identities.push_back(std::move(ident));
  }
  return index;
}

}  // namespace morph
