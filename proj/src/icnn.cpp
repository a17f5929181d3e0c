#include "stni/icnn.hpp"

namespace stni {

void ICNNConfig::validate() const {
  if (in_channels < 1 || out_channels < 2)
    throw UsageError("icnn config: need in_channels >= 1 and out_channels >= 2");
  if (interlink_rounds < 1) throw UsageError("icnn config: interlink_rounds must be >= 1");
  if (fusion_width < 1) throw UsageError("icnn config: fusion_width must be >= 1");
  if (input_size < 8) throw UsageError("icnn config: input_size must be >= 8");
  for (int w : branch_widths)
    if (w < 1) throw UsageError("icnn config: branch widths must be positive");
}

int ICNNConfig::in_channels_of(int round, int branch) const {
  if (round == 0) return in_channels;
  if (!interlink) return branch_widths[static_cast<size_t>(branch)];
  int c = branch_widths[static_cast<size_t>(branch)];
  if (branch > 0) c += branch_widths[static_cast<size_t>(branch - 1)];
  if (branch < 3) c += branch_widths[static_cast<size_t>(branch + 1)];
  return c;
}

int64_t ICNNConfig::param_count() const {
  int64_t n = 0;
  auto conv_bn = [](int in, int out) {
    return static_cast<int64_t>(out) * in * 9 + out /*bias*/ + 2 * out /*gamma,beta*/;
  };
  for (int r = 0; r < interlink_rounds; ++r)
    for (int b = 0; b < 4; ++b)
      n += conv_bn(in_channels_of(r, b), branch_widths[static_cast<size_t>(b)]);
  int fuse_in = 0;
  for (int w : branch_widths) fuse_in += w;
  n += conv_bn(fuse_in, fusion_width);
  n += static_cast<int64_t>(out_channels) * fusion_width * 9 + out_channels;
  return n;
}

template <typename T>
void ICNNModel<T>::visit(const ParamVisitor<T>& fn) {
  for (size_t r = 0; r < rounds.size(); ++r)
    for (int b = 0; b < 4; ++b)
      rounds[r][static_cast<size_t>(b)].visit(
          "round" + std::to_string(r) + ".branch" + std::to_string(b), fn);
  fuse.visit("fuse", fn);
  fn("out.conv.weight", out_weight);
  fn("out.conv.bias", out_bias);
}

template <typename T>
void ICNNModel<T>::visit_state(const StateVisitor<T>& fn) {
  for (size_t r = 0; r < rounds.size(); ++r)
    for (int b = 0; b < 4; ++b)
      rounds[r][static_cast<size_t>(b)].visit_state(
          "round" + std::to_string(r) + ".branch" + std::to_string(b), fn);
  fuse.visit_state("fuse", fn);
}

template <typename T>
ICNNModel<T> icnn_init(const ICNNConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ICNNModel<T> m;
  m.config = config;
  m.rounds.resize(static_cast<size_t>(config.interlink_rounds));
  for (int r = 0; r < config.interlink_rounds; ++r)
    for (int b = 0; b < 4; ++b)
      m.rounds[static_cast<size_t>(r)][static_cast<size_t>(b)].init(
          config.in_channels_of(r, b), config.branch_widths[static_cast<size_t>(b)], rng);
  int fuse_in = 0;
  for (int w : config.branch_widths) fuse_in += w;
  m.fuse.init(fuse_in, config.fusion_width, rng);

  const int fan_in = config.fusion_width * 9;
  const double std = std::sqrt(2.0 / fan_in);
  std::vector<T> w(static_cast<size_t>(config.out_channels) * config.fusion_width * 9);
  for (auto& v : w) v = static_cast<T>(rng.gaussian() * std);
  m.out_weight = Tensor<T>({config.out_channels, config.fusion_width, 3, 3}, std::move(w));
  m.out_weight.set_requires_grad(true);
  m.out_bias = Tensor<T>({config.out_channels});
  m.out_bias.set_requires_grad(true);
  return m;
}

namespace {

// Upsample by 2^levels (nearest) and crop to the target extent; the crop
// absorbs the excess introduced by ceil-mode pooling on odd sizes.
template <typename T>
Tensor<T> restore_scale(const Tensor<T>& x, int levels, int target_h, int target_w) {
  if (levels == 0) return x;
  Tensor<T> up = upsample_nearest(x, 1 << levels);
  return crop_spatial(up, target_h, target_w);
}

}  // namespace

template <typename T>
Tensor<T> icnn_forward(ICNNModel<T>& model, const Tensor<T>& image, NetMode mode) {
  const ICNNConfig& cfg = model.config;
  if (image.rank() != 4 || image.dim(1) != cfg.in_channels || image.dim(2) != cfg.input_size ||
      image.dim(3) != cfg.input_size)
    throw ShapeError("icnn_forward: expected [B," + std::to_string(cfg.in_channels) + "," +
                     std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                     "], got " + shape_str(image.shape()));

  // Branch inputs at scales 1, 1/2, 1/4, 1/8.
  std::array<Tensor<T>, 4> feats;
  feats[0] = image;
  for (int b = 1; b < 4; ++b) feats[static_cast<size_t>(b)] = maxpool2d(feats[static_cast<size_t>(b - 1)], true);
  std::array<int, 4> sizes;
  for (int b = 0; b < 4; ++b) sizes[static_cast<size_t>(b)] = feats[static_cast<size_t>(b)].dim(2);

  for (int r = 0; r < cfg.interlink_rounds; ++r) {
    std::array<Tensor<T>, 4> conved;
    for (int b = 0; b < 4; ++b)
      conved[static_cast<size_t>(b)] =
          model.rounds[static_cast<size_t>(r)][static_cast<size_t>(b)].forward(
              feats[static_cast<size_t>(b)], mode);
    if (r + 1 < cfg.interlink_rounds && cfg.interlink) {
      // Exchange between rounds: own features, the next-smaller-scale
      // branch upsampled, the next-larger-scale branch downsampled.
      for (int b = 0; b < 4; ++b) {
        std::vector<Tensor<T>> parts{conved[static_cast<size_t>(b)]};
        if (b < 3)
          parts.push_back(restore_scale(conved[static_cast<size_t>(b + 1)], 1,
                                        sizes[static_cast<size_t>(b)], sizes[static_cast<size_t>(b)]));
        if (b > 0) parts.push_back(maxpool2d(conved[static_cast<size_t>(b - 1)], true));
        feats[static_cast<size_t>(b)] = concat_channels(parts);
      }
    } else {
      feats = conved;
    }
  }

  std::vector<Tensor<T>> fused{feats[0]};
  for (int b = 1; b < 4; ++b)
    fused.push_back(restore_scale(feats[static_cast<size_t>(b)], b, cfg.input_size, cfg.input_size));
  Tensor<T> fusion = model.fuse.forward(concat_channels(fused), mode);
  return conv2d(fusion, model.out_weight, model.out_bias);
}

#define STNI_INSTANTIATE_ICNN(T)                                                  \
  template struct ICNNModel<T>;                                                   \
  template ICNNModel<T> icnn_init<T>(const ICNNConfig&, uint64_t);                \
  template Tensor<T> icnn_forward<T>(ICNNModel<T>&, const Tensor<T>&, NetMode);

STNI_INSTANTIATE_ICNN(float)
STNI_INSTANTIATE_ICNN(double)

#undef STNI_INSTANTIATE_ICNN

}  // namespace stni
