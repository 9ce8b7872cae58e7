#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "htc/ops.hpp"
#include "htc/optim.hpp"
#include "htc/tensor.hpp"

namespace htc {

// Central parameter registry. Every layer allocates its tensors here so the
// trainer, checkpointing and the gradient-topology tests can address them
// by name. Names must be unique.
template <typename S>
class ParamRegistry {
 public:
  explicit ParamRegistry(uint64_t seed) : seed_(seed) {}

  Tensor<S> conv_weight(const std::string& name, int out_c, int in_c, int kh, int kw,
                        double scale = 1.0) {
    Tensor<S> t = Tensor<S>::zeros({out_c, in_c, kh, kw});
    kaiming_uniform_fill(t, in_c * kh * kw, seed_, name, scale);
    return add(name, t);
  }

  // weight [Cin, Cout, k, k] for transposed convolution
  Tensor<S> deconv_weight(const std::string& name, int in_c, int out_c, int k,
                          double scale = 1.0) {
    Tensor<S> t = Tensor<S>::zeros({in_c, out_c, k, k});
    kaiming_uniform_fill(t, in_c * k * k, seed_, name, scale);
    return add(name, t);
  }

  Tensor<S> linear_weight(const std::string& name, int out_f, int in_f, double scale = 1.0) {
    Tensor<S> t = Tensor<S>::zeros({out_f, in_f});
    kaiming_uniform_fill(t, in_f, seed_, name, scale);
    return add(name, t);
  }

  Tensor<S> zero_bias(const std::string& name, int n) {
    return add(name, Tensor<S>::zeros({n}));
  }

  std::vector<Parameter<S>>& params() { return params_; }
  const std::vector<Parameter<S>>& params() const { return params_; }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  // All parameters whose name starts with `prefix`.
  std::vector<Parameter<S>*> find_prefix(const std::string& prefix) {
    std::vector<Parameter<S>*> out;
    for (auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) out.push_back(&p);
    return out;
  }

  void zero_grads() {
    for (auto& p : params_) p.value.zero_grad();
  }

  uint64_t seed() const { return seed_; }

 private:
  Tensor<S> add(const std::string& name, Tensor<S> t) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back(Parameter<S>{name, t, true});
    return t;
  }

  uint64_t seed_;
  std::vector<Parameter<S>> params_;
  std::unordered_map<std::string, size_t> index_;
};

template <typename S>
struct ConvLayer {
  Tensor<S> weight, bias;
  int stride = 1, padding = 0;

  ConvLayer() = default;
  ConvLayer(ParamRegistry<S>& reg, const std::string& name, int out_c, int in_c, int k,
            int stride_ = 1, int padding_ = 0, double scale = 1.0)
      : weight(reg.conv_weight(name + ".weight", out_c, in_c, k, k, scale)),
        bias(reg.zero_bias(name + ".bias", out_c)),
        stride(stride_),
        padding(padding_) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, weight, bias, stride, padding); }
};

template <typename S>
struct LinearLayer {
  Tensor<S> weight, bias;

  LinearLayer() = default;
  LinearLayer(ParamRegistry<S>& reg, const std::string& name, int out_f, int in_f,
              double scale = 1.0)
      : weight(reg.linear_weight(name + ".weight", out_f, in_f, scale)),
        bias(reg.zero_bias(name + ".bias", out_f)) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, weight, bias); }
};

// Multi-level backbone output. levels[0..3] are P2..P5 at strides 4/8/16/32,
// all with the same channel count.
template <typename S>
struct FeaturePyramid {
  std::array<Tensor<S>, 4> levels;
  int channels = 0;
  int image_h = 0, image_w = 0;

  static constexpr std::array<int, 4> kStrides{4, 8, 16, 32};
  std::array<double, 4> spatial_scales() const {
    return {1.0 / 4, 1.0 / 8, 1.0 / 16, 1.0 / 32};
  }
};

template <typename S>
struct SemanticFeatureMap {
  Tensor<S> features;  // [N, C, H/8, W/8]
  Tensor<S> logits;    // [N, num_stuff_classes, H/8, W/8]
};

// Tiny convolutional backbone + FPN. Four stages of
// [conv3x3, relu, conv3x3, relu, maxpool2] with widths 16/32/64/64 behind a
// stride-2 stem conv, so stage outputs land exactly on the P2..P5 stride
// table. Lateral 1x1 convs map to a uniform width, top-down path upsamples
// bilinearly, and each merged map passes a 3x3 smoothing conv.
template <typename S>
class BackboneFpn {
 public:
  static constexpr int kStemWidth = 8;
  static constexpr std::array<int, 4> kStageWidths{16, 32, 64, 64};

  BackboneFpn(ParamRegistry<S>& reg, int out_channels = 32) : channels_(out_channels) {
    stem_ = ConvLayer<S>(reg, "backbone.stem.conv", kStemWidth, 3, 3, 1, 1);
    int in_c = kStemWidth;
    for (int s = 0; s < 4; ++s) {
      const std::string base = "backbone.stage" + std::to_string(s + 1);
      stage_conv1_[s] = ConvLayer<S>(reg, base + ".conv1", kStageWidths[s], in_c, 3, 1, 1);
      stage_conv2_[s] = ConvLayer<S>(reg, base + ".conv2", kStageWidths[s], kStageWidths[s], 3, 1, 1);
      in_c = kStageWidths[s];
    }
    for (int l = 0; l < 4; ++l) {
      const std::string lvl = std::to_string(l + 2);
      lateral_[l] = ConvLayer<S>(reg, "fpn.lateral" + lvl, channels_, kStageWidths[l], 1, 1, 0);
      smooth_[l] = ConvLayer<S>(reg, "fpn.smooth" + lvl, channels_, channels_, 3, 1, 1);
    }
  }

  FeaturePyramid<S> forward(const Tensor<S>& image) const {
    if (image.ndim() != 4 || image.dim(1) != 3)
      throw std::invalid_argument("backbone: image must be [N,3,H,W], got " +
                                  shape_str(image.shape()));
    const int H = image.dim(2), W = image.dim(3);
    if (H % 32 != 0 || W % 32 != 0)
      throw std::invalid_argument("backbone: image size " + std::to_string(H) + "x" +
                                  std::to_string(W) + " not divisible by 32");

    Tensor<S> x = maxpool2d(relu(stem_(image)), 2, 2);
    std::array<Tensor<S>, 4> stage_out;
    for (int s = 0; s < 4; ++s) {
      x = relu(stage_conv1_[s](x));
      x = relu(stage_conv2_[s](x));
      x = maxpool2d(x, 2, 2);
      stage_out[s] = x;
    }

    std::array<Tensor<S>, 4> lat;
    for (int l = 0; l < 4; ++l) lat[l] = lateral_[l](stage_out[l]);

    FeaturePyramid<S> pyr;
    pyr.channels = channels_;
    pyr.image_h = H;
    pyr.image_w = W;
    Tensor<S> td = lat[3];
    pyr.levels[3] = smooth_[3](td);
    for (int l = 2; l >= 0; --l) {
      td = elementwise_add(lat[l], bilinear_resize(td, lat[l].dim(2), lat[l].dim(3)));
      pyr.levels[l] = smooth_[l](td);
    }
    return pyr;
  }

  int channels() const { return channels_; }

 private:
  int channels_;
  ConvLayer<S> stem_;
  std::array<ConvLayer<S>, 4> stage_conv1_, stage_conv2_;
  std::array<ConvLayer<S>, 4> lateral_, smooth_;
};

// Stuff-segmentation branch over the pyramid: per-level 1x1 convs align
// channels, every level is resized (bilinear) to the stride-8 grid, fused by
// element-wise sum, then refined by four 3x3 convs; a final 1x1 conv
// predicts per-pixel stuff logits.
template <typename S>
class SemanticBranch {
 public:
  SemanticBranch(ParamRegistry<S>& reg, int channels, int num_stuff_classes)
      : channels_(channels), num_stuff_classes_(num_stuff_classes) {
    for (int l = 0; l < 4; ++l)
      lateral_[l] = ConvLayer<S>(reg, "semantic.lateral" + std::to_string(l + 2), channels_,
                                 channels_, 1, 1, 0);
    for (int i = 0; i < 4; ++i)
      fuse_conv_[i] =
          ConvLayer<S>(reg, "semantic.conv" + std::to_string(i + 1), channels_, channels_, 3, 1, 1);
    predict_ = ConvLayer<S>(reg, "semantic.predict", num_stuff_classes_, channels_, 1, 1, 0);
  }

  SemanticFeatureMap<S> forward(const FeaturePyramid<S>& pyr) const {
    const int th = pyr.levels[1].dim(2);  // P3 sits at stride 8
    const int tw = pyr.levels[1].dim(3);
    Tensor<S> fused;
    for (int l = 0; l < 4; ++l) {
      Tensor<S> t = lateral_[l](pyr.levels[static_cast<size_t>(l)]);
      t = bilinear_resize(t, th, tw);
      fused = l == 0 ? t : elementwise_add(fused, t);
    }
    for (int i = 0; i < 4; ++i) fused = relu(fuse_conv_[i](fused));
    SemanticFeatureMap<S> out;
    out.features = fused;
    out.logits = predict_(fused);
    return out;
  }

  int num_stuff_classes() const { return num_stuff_classes_; }

 private:
  int channels_;
  int num_stuff_classes_;
  std::array<ConvLayer<S>, 4> lateral_;
  std::array<ConvLayer<S>, 4> fuse_conv_;
  ConvLayer<S> predict_;
};

}  // namespace htc
