#pragma once

// K-stage residual restoration cascade:
//   y1 = f1(x, S(x), G(x)),  yk = fk(y(k-1), S(x), G(x)),  output = yK.
//
// Each stage is a small convolutional encoder-decoder that predicts a
// residual correction to its own image input. Guidance enters at three
// points: the depth channel is concatenated with RGB at the input, the four
// semantic maps are fused at the 1/8 bottleneck, and the deepest semantic map
// plus normals and points are injected into the deep blocks at 1/4 and 1/8.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "deshadow/guidance.hpp"
#include "deshadow/image_ops.hpp"
#include "deshadow/random.hpp"

namespace deshadow {

namespace guidance_mask {
inline constexpr unsigned semantic = 1u;
inline constexpr unsigned depth = 2u;
inline constexpr unsigned geometry = 4u;  // normals and points
inline constexpr unsigned all = semantic | depth | geometry;
}  // namespace guidance_mask

struct ArchConfig {
  std::size_t width = 8;              // feature channels inside a stage
  std::size_t semantic_channels = 8;  // channels per semantic level
  unsigned guidance = guidance_mask::all;

  bool uses(unsigned flag) const { return (guidance & flag) != 0; }
  bool operator==(const ArchConfig&) const = default;
};

struct Parameter {
  std::string name;
  Tensor value;
};

struct ConvLayer {
  Tensor weight;  // [F,C,k,k]
  Tensor bias;    // [F]

  ConvLayer() = default;
  ConvLayer(std::size_t in, std::size_t out, std::size_t k)
      : weight(Tensor::zeros({out, in, k, k})), bias(Tensor::zeros({out})) {
    weight.set_requires_grad();
    bias.set_requires_grad();
  }
  // Copies own their storage.
  ConvLayer(const ConvLayer& o) : weight(o.weight.clone()), bias(o.bias.clone()) {}
  ConvLayer& operator=(const ConvLayer& o) {
    if (this != &o) {
      weight = o.weight.clone();
      bias = o.bias.clone();
    }
    return *this;
  }
  ConvLayer(ConvLayer&&) = default;
  ConvLayer& operator=(ConvLayer&&) = default;

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias); }

  std::size_t count() const { return weight.numel() + bias.numel(); }

  void init_he(Rng& rng, double gain = 1.0) {
    const double fan_in =
        static_cast<double>(weight.dim(1) * weight.dim(2) * weight.dim(3));
    const double std = gain * std::sqrt(2.0 / fan_in);
    for (double& v : weight.mutable_data()) v = std * rng.normal();
    for (double& v : bias.mutable_data()) v = 0.0;
  }
};

/// Guidance resampled to the working resolutions of a stage. Built once per
/// input and shared by every stage of the cascade.
class PreparedGuidance {
 public:
  PreparedGuidance(const GuidanceBundle& g, const ArchConfig& arch)
      : source_(&g) {
    NoGradGuard no_grad;
    const std::size_t H = g.height(), W = g.width();
    const std::size_t h4 = H / 4, w4 = W / 4, h8 = H / 8, w8 = W / 8;
    if (g.semantic_channels() != arch.semantic_channels) {
      throw ShapeError("guidance has " + std::to_string(g.semantic_channels()) +
                       " semantic channels, model expects " +
                       std::to_string(arch.semantic_channels));
    }
    const std::size_t cs = arch.semantic_channels;
    depth_ = arch.uses(guidance_mask::depth) ? g.depth()
                                             : Tensor::zeros({1, H, W});
    if (arch.uses(guidance_mask::semantic)) {
      std::vector<Tensor> levels;
      for (const auto& s : g.semantic()) levels.push_back(resize_bilinear(s, h8, w8));
      semantic_fused_ = concat_channels(levels);
      deep_sem4_ = resize_bilinear(g.semantic()[3], h4, w4);
      deep_sem8_ = resize_bilinear(g.semantic()[3], h8, w8);
    } else {
      semantic_fused_ = Tensor::zeros({4 * cs, h8, w8});
      deep_sem4_ = Tensor::zeros({cs, h4, w4});
      deep_sem8_ = Tensor::zeros({cs, h8, w8});
    }
    if (arch.uses(guidance_mask::geometry)) {
      geo4_ = concat_channels({resize_bilinear(g.normals(), h4, w4),
                               resize_bilinear(g.points(), h4, w4)});
      geo8_ = concat_channels({resize_bilinear(g.normals(), h8, w8),
                               resize_bilinear(g.points(), h8, w8)});
    } else {
      geo4_ = Tensor::zeros({6, h4, w4});
      geo8_ = Tensor::zeros({6, h8, w8});
    }
  }

  const GuidanceBundle& source() const { return *source_; }
  const Tensor& depth() const { return depth_; }
  const Tensor& semantic_fused() const { return semantic_fused_; }
  const Tensor& deep_semantic4() const { return deep_sem4_; }
  const Tensor& deep_semantic8() const { return deep_sem8_; }
  const Tensor& geometry4() const { return geo4_; }
  const Tensor& geometry8() const { return geo8_; }

 private:
  const GuidanceBundle* source_;
  Tensor depth_, semantic_fused_, deep_sem4_, deep_sem8_, geo4_, geo8_;
};

class StageNet {
 public:
  StageNet() = default;

  explicit StageNet(const ArchConfig& arch) : arch_(arch) {
    const std::size_t c = arch.width, cs = arch.semantic_channels;
    fuse_ = ConvLayer(4, c, 3);
    down1_ = ConvLayer(c, c, 3);
    down2_ = ConvLayer(c, c, 3);
    deep4_ = ConvLayer(c + cs + 6, c, 3);
    bottleneck_ = ConvLayer(c + 4 * cs, c, 1);
    deep8_ = ConvLayer(c + cs + 6, c, 3);
    up1_ = ConvLayer(c, c, 3);
    up2_ = ConvLayer(c, c, 3);
    out_ = ConvLayer(c, 3, 3);
  }

  StageNet(const ArchConfig& arch, Rng& rng) : StageNet(arch) {
    for (ConvLayer* layer : layers()) layer->init_he(rng);
    // Start close to the identity map.
    out_.init_he(rng, 0.1);
  }

  /// image [3,H,W] -> image + residual.
  Tensor forward(const Tensor& image, const PreparedGuidance& g) const {
    const std::size_t H = image.dim(1), W = image.dim(2);
    const Tensor x0 = relu(fuse_(concat_channels({image, g.depth()})));
    const Tensor x1 = relu(down1_(avg_pool2(x0)));
    Tensor x2 = relu(down2_(avg_pool2(x1)));
    x2 = x2 + relu(deep4_(concat_channels({x2, g.deep_semantic4(), g.geometry4()})));
    Tensor x3 = relu(bottleneck_(concat_channels({avg_pool2(x2), g.semantic_fused()})));
    x3 = x3 + relu(deep8_(concat_channels({x3, g.deep_semantic8(), g.geometry8()})));
    const Tensor u2 = relu(up1_(resize_bilinear(x3, H / 4, W / 4) + x2));
    const Tensor u1 = relu(up2_(resize_bilinear(u2, H / 2, W / 2) + x1));
    const Tensor u0 = resize_bilinear(u1, H, W) + x0;
    return image + out_(u0);
  }

  std::vector<Parameter> parameters() const {
    std::vector<Parameter> out;
    static constexpr const char* names[] = {"fuse", "down1", "down2",
                                            "deep4", "bottleneck", "deep8",
                                            "up1",  "up2",   "out"};
    auto ls = const_cast<StageNet*>(this)->layers();
    for (std::size_t i = 0; i < ls.size(); ++i) {
      out.push_back({std::string(names[i]) + ".weight", ls[i]->weight});
      out.push_back({std::string(names[i]) + ".bias", ls[i]->bias});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const ConvLayer* l : const_cast<StageNet*>(this)->layers()) n += l->count();
    return n;
  }

  /// Zeroes the residual head so that the stage is the identity map.
  void zero_output_head() {
    for (double& v : out_.weight.mutable_data()) v = 0.0;
    for (double& v : out_.bias.mutable_data()) v = 0.0;
  }

  const ArchConfig& arch() const { return arch_; }

 private:
  std::vector<ConvLayer*> layers() {
    return {&fuse_, &down1_, &down2_, &deep4_, &bottleneck_,
            &deep8_, &up1_, &up2_, &out_};
  }

  ArchConfig arch_;
  ConvLayer fuse_, down1_, down2_, deep4_, bottleneck_, deep8_, up1_, up2_, out_;
};

/// Per-stage record of what a forward pass consumed.
struct StageTrace {
  const GuidanceBundle* guidance;
  std::uint64_t input_fingerprint;
};

class Cascade {
 public:
  Cascade() = default;

  Cascade(const ArchConfig& arch, std::size_t stages, std::uint64_t seed)
      : arch_(arch) {
    if (stages == 0) throw Error("cascade needs at least one stage");
    for (std::size_t k = 0; k < stages; ++k) {
      Rng rng(mix_seed(seed, k));
      stages_.emplace_back(arch, rng);
    }
  }

  Cascade(const ArchConfig& arch, std::vector<StageNet> stages)
      : arch_(arch), stages_(std::move(stages)) {}

  std::size_t size() const { return stages_.size(); }
  const ArchConfig& arch() const { return arch_; }
  const StageNet& stage(std::size_t k) const { return stages_.at(k); }
  StageNet& stage(std::size_t k) { return stages_.at(k); }

  /// All intermediate predictions y1..yK (unclamped).
  std::vector<Tensor> forward_all(const Tensor& x, const GuidanceBundle& g,
                                  std::vector<StageTrace>* trace = nullptr) const {
    require_rgb(x, "forward_all");
    if (stages_.empty()) throw Error("forward_all on an empty cascade");
    if (g.height() != x.dim(1) || g.width() != x.dim(2)) {
      throw ShapeError("guidance is " + std::to_string(g.height()) + "x" +
                       std::to_string(g.width()) + " but image is " +
                       shape_str(x.shape()));
    }
    const PreparedGuidance prepared(g, arch_);
    std::vector<Tensor> preds;
    preds.reserve(stages_.size());
    Tensor current = x;
    for (const StageNet& s : stages_) {
      if (trace) trace->push_back({&prepared.source(), fingerprint(current)});
      current = s.forward(current, prepared);
      preds.push_back(current);
    }
    return preds;
  }

  /// Final prediction without recording a graph, before clamping.
  Tensor predict_raw(const Tensor& x, const GuidanceBundle& g) const {
    NoGradGuard no_grad;
    return forward_all(x, g).back();
  }

  /// Final prediction clamped to [0,1].
  Tensor predict(const Tensor& x, const GuidanceBundle& g) const {
    NoGradGuard no_grad;
    return clamp(predict_raw(x, g), 0.0, 1.0);
  }

  std::vector<Parameter> parameters() const {
    std::vector<Parameter> out;
    for (std::size_t k = 0; k < stages_.size(); ++k) {
      for (auto& p : stages_[k].parameters()) {
        out.push_back({"stage" + std::to_string(k) + "." + p.name, p.value});
      }
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.value.zero_grad();
  }

  std::uint64_t fingerprint_parameters() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : parameters()) h = fingerprint(p.value, h);
    return h;
  }

 private:
  ArchConfig arch_;
  std::vector<StageNet> stages_;
};

inline std::size_t count_parameters(const Cascade& c) {
  std::size_t n = 0;
  for (std::size_t k = 0; k < c.size(); ++k) n += c.stage(k).parameter_count();
  return n;
}

/// Warm-start expansion: stage 1 copies the source's stage 1 and every added
/// stage copies the source's last stage. All copies are deep.
inline Cascade expand_cascade(const Cascade& src, std::size_t k_dst) {
  if (src.size() == 0) throw Error("expand_cascade: empty source cascade");
  if (k_dst <= src.size()) {
    throw Error("expand_cascade: target stage count " + std::to_string(k_dst) +
                " must exceed source stage count " + std::to_string(src.size()));
  }
  std::vector<StageNet> stages;
  stages.push_back(src.stage(0));
  const StageNet& donor = src.stage(src.size() - 1);
  for (std::size_t k = 1; k < k_dst; ++k) {
    stages.push_back(k < src.size() - 1 ? src.stage(k) : donor);
  }
  return Cascade(src.arch(), std::move(stages));
}

}  // namespace deshadow
