#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "cnntention/ops.hpp"
#include "cnntention/resnet.hpp"

namespace cnntention {

struct Heatmap {
  std::vector<float> values;  // H x W, in [0, 1]
  std::size_t height = 0, width = 0;
  int target_class = -1;
  std::string layer;
};

inline ResNet20<float>::Capture parse_capture(const std::string& name) {
  using C = ResNet20<float>::Capture;
  if (name == "stage1") return C::kStage1;
  if (name == "stage2") return C::kStage2;
  if (name == "stage3") return C::kStage3;
  fail("gradcam: unknown layer '" + name + "' (expected stage1|stage2|stage3)");
}

inline const char* capture_name(ResNet20<float>::Capture c) {
  using C = ResNet20<float>::Capture;
  switch (c) {
    case C::kStage1: return "stage1";
    case C::kStage2: return "stage2";
    case C::kStage3: return "stage3";
    default: return "none";
  }
}

// GradCAM for a single normalized image (1 x C x H x W): channel weights are
// the spatial means of d(score)/d(activation) at the target layer, the map is
// the ReLU of the weighted activation sum, bilinearly upsampled to the input
// size and min-max normalized (identically-zero maps stay zero).
inline Heatmap gradcam(ResNet20<float>& model, const Tensor<float>& image, int class_index,
                       ResNet20<float>::Capture layer = ResNet20<float>::Capture::kStage3) {
  require(image.ndim() == 4 && image.dim(0) == 1,
          "gradcam: expected a single 1xCxHxW image, got " + shape_str(image.shape()));
  require(class_index >= 0 &&
              static_cast<std::size_t>(class_index) < model.config().num_classes,
          "gradcam: class index " + std::to_string(class_index) + " outside [0, " +
              std::to_string(model.config().num_classes) + ")");
  require(layer != ResNet20<float>::Capture::kNone, "gradcam: no target layer given");

  Tensor<float> act;
  {
    Tape<float> tape;
    Tensor<float> input = image;
    input.set_requires_grad();  // ensures a path is recorded even for frozen models
    Tensor<float> logits = model.forward_capture(input, Mode::kEval, layer, &act);
    Tensor<float> score = take(logits, static_cast<std::size_t>(class_index));
    tape.backward(score);
  }
  require(act.defined() && act.has_grad(), "gradcam: target layer activation has no gradient");

  const std::size_t c = act.dim(1), h = act.dim(2), w = act.dim(3), hw = h * w;
  auto av = act.value();
  auto gv = act.grad_view();
  std::vector<float> cam(hw, 0.0f);
  for (std::size_t ch = 0; ch < c; ++ch) {
    float alpha = 0.0f;
    const float* g = gv.data() + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) alpha += g[i];
    alpha /= static_cast<float>(hw);
    const float* a = av.data() + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) cam[i] += alpha * a[i];
  }
  for (auto& v : cam) v = v > 0.0f ? v : 0.0f;

  Tensor<float> cam_t(Shape{1, 1, h, w}, std::move(cam));
  Tensor<float> up = bilinear_upsample(cam_t, image.dim(2), image.dim(3));

  Heatmap out;
  out.height = image.dim(2);
  out.width = image.dim(3);
  out.target_class = class_index;
  out.layer = capture_name(layer);
  out.values.assign(up.value().begin(), up.value().end());
  float mn = out.values[0], mx = out.values[0];
  for (float v : out.values) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (mx > mn) {
    const float inv = 1.0f / (mx - mn);
    for (auto& v : out.values) v = (v - mn) * inv;
  } else if (mx > 0.0f) {
    for (auto& v : out.values) v = 1.0f;
  }  // identically-zero map stays zero
  return out;
}

// Predicted class of a single image (used when no target class is forced).
inline int predict_class(ResNet20<float>& model, const Tensor<float>& image) {
  Tensor<float> logits = model.forward(image, Mode::kEval);
  auto lv = logits.value();
  std::size_t best = 0;
  for (std::size_t i = 1; i < lv.size(); ++i)
    if (lv[i] > lv[best]) best = i;
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// Rendering: raw heatmap as 8-bit PGM (P5) and an overlay as PPM (P6) with
// pixel = 0.5 * grayscale(image) + 0.5 * colormap(heatmap), colormap linear
// from blue (0) to red (1). The image is the raw [0,1] pixel data.
// ---------------------------------------------------------------------------

inline unsigned char to_byte(float v) {
  float x = v * 255.0f + 0.5f;
  if (x < 0.0f) x = 0.0f;
  if (x > 255.0f) x = 255.0f;
  return static_cast<unsigned char>(x);
}

inline void write_pgm(const Heatmap& heat, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "gradcam: cannot write '" + path + "'");
  out << "P5\n" << heat.width << " " << heat.height << "\n255\n";
  for (float v : heat.values) out.put(static_cast<char>(to_byte(v)));
  require(out.good(), "gradcam: write to '" + path + "' failed");
}

inline void write_overlay_ppm(const Heatmap& heat, const std::vector<float>& image,
                              std::size_t channels, const std::string& path) {
  require(image.size() == channels * heat.height * heat.width,
          "gradcam: image does not match heatmap dimensions");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "gradcam: cannot write '" + path + "'");
  out << "P6\n" << heat.width << " " << heat.height << "\n255\n";
  const std::size_t hw = heat.height * heat.width;
  for (std::size_t i = 0; i < hw; ++i) {
    float gray;
    if (channels == 3) {
      gray = 0.299f * image[i] + 0.587f * image[hw + i] + 0.114f * image[2 * hw + i];
    } else {
      gray = image[i];
    }
    const float hv = heat.values[i];
    out.put(static_cast<char>(to_byte(0.5f * gray + 0.5f * hv)));            // red
    out.put(static_cast<char>(to_byte(0.5f * gray)));                        // green
    out.put(static_cast<char>(to_byte(0.5f * gray + 0.5f * (1.0f - hv))));   // blue
  }
  require(out.good(), "gradcam: write to '" + path + "' failed");
}

}  // namespace cnntention
