#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "imbseg/errors.hpp"
#include "imbseg/loss.hpp"
#include "imbseg/rng.hpp"
#include "imbseg/volume.hpp"

namespace imbseg {

// Miniature 3D U-Net: per level two 3x3x3 conv + leaky-rectifier blocks,
// strided 2x2x2 average pooling between levels, mirrored decoder with skip
// connections (nearest-neighbor upsample followed by conv), final 1x1x1 conv
// to a single logit channel. Channel count doubles per level up to
// max_channels.
struct NetConfig {
  int in_channels = 1;
  int base_channels = 8;
  int levels = 2;
  int max_channels = 360;
  double leaky_slope = 0.01;
};

inline void validate(const NetConfig& cfg) {
  if (cfg.in_channels < 1) throw config_error("net: in_channels must be >= 1");
  if (cfg.base_channels < 1) throw config_error("net: base_channels must be >= 1");
  if (cfg.levels < 1) throw config_error("net: levels must be >= 1");
  if (cfg.max_channels < cfg.base_channels) throw config_error("net: max_channels must be >= base_channels");
  if (cfg.leaky_slope < 0.0) throw config_error("net: leaky_slope must be >= 0");
}

// The full-scale configuration reported for the original pipeline (channel
// cap 360). Kept as reference data only: with the matching patch size it is
// far beyond what a desktop CPU run can train, and the original's
// anisotropic pooling is not reproduced by this miniature.
inline NetConfig paper_scale_net() { return NetConfig{1, 32, 6, 360, 0.01}; }

inline int level_channels(const NetConfig& cfg, int level) {
  long long c = static_cast<long long>(cfg.base_channels) << level;
  return static_cast<int>(std::min<long long>(c, cfg.max_channels));
}

struct LayerShape {
  std::string name;
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 3;

  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_ch) * static_cast<std::size_t>(in_ch) *
           static_cast<std::size_t>(kernel) * static_cast<std::size_t>(kernel) * static_cast<std::size_t>(kernel);
  }
  std::size_t param_count() const { return weight_count() + static_cast<std::size_t>(out_ch); }
};

// Conv layers in execution order: encoder pairs top-down, then per decoder
// stage up-conv + two blocks bottom-up, then the logit head.
inline std::vector<LayerShape> layer_shapes(const NetConfig& cfg) {
  validate(cfg);
  std::vector<LayerShape> shapes;
  for (int l = 0; l < cfg.levels; ++l) {
    const int c = level_channels(cfg, l);
    const int cin = (l == 0) ? cfg.in_channels : level_channels(cfg, l - 1);
    shapes.push_back({"enc" + std::to_string(l) + "a", cin, c, 3});
    shapes.push_back({"enc" + std::to_string(l) + "b", c, c, 3});
  }
  for (int l = cfg.levels - 2; l >= 0; --l) {
    const int c = level_channels(cfg, l);
    shapes.push_back({"up" + std::to_string(l), level_channels(cfg, l + 1), c, 3});
    shapes.push_back({"dec" + std::to_string(l) + "a", 2 * c, c, 3});
    shapes.push_back({"dec" + std::to_string(l) + "b", c, c, 3});
  }
  shapes.push_back({"final", level_channels(cfg, 0), 1, 1});
  return shapes;
}

struct ModelParams {
  std::vector<LayerShape> shapes;
  std::vector<double> values;
  std::uint64_t init_seed = 0;
};

inline std::size_t param_count(const std::vector<LayerShape>& shapes) {
  std::size_t n = 0;
  for (const auto& s : shapes) n += s.param_count();
  return n;
}

// He-normal weights (fan-in = in_ch * k^3), zero biases except the final
// logit bias. That one starts at kFinalBiasInit, the equilibrium logit for
// the foreground fraction of an oversampled training batch (~2%), instead of
// 0.5 probability. Starting at 0.5 makes the first optimizer steps slam every
// logit downward hard enough (momentum keeps pushing long after the gradient
// fades) to land in the saturated sigmoid tail where updates underflow; a far
// more negative start is just as bad because sigmoid'(logit) throttles every
// weight gradient, so nothing can climb back out before momentum decays.
inline constexpr double kFinalBiasInit = -4.0;

inline ModelParams init_params(const NetConfig& cfg, std::uint64_t seed) {
  ModelParams p;
  p.shapes = layer_shapes(cfg);
  p.init_seed = seed;
  p.values.reserve(param_count(p.shapes));
  Rng rng(seed);
  for (std::size_t li = 0; li < p.shapes.size(); ++li) {
    const auto& s = p.shapes[li];
    const bool final_layer = li + 1 == p.shapes.size();
    const double stddev = std::sqrt(2.0 / (static_cast<double>(s.in_ch) * s.kernel * s.kernel * s.kernel));
    for (std::size_t i = 0; i < s.weight_count(); ++i) p.values.push_back(stddev * rng.normal());
    for (int i = 0; i < s.out_ch; ++i) p.values.push_back(final_layer ? kFinalBiasInit : 0.0);
  }
  return p;
}

namespace detail {

struct Tensor {
  int ch = 0;
  Index3 d{0, 0, 0};
  std::vector<double> v;

  Tensor() = default;
  Tensor(int c, const Index3& dims) : ch(c), d(dims), v(static_cast<std::size_t>(c) * voxel_count(dims), 0.0) {}

  std::size_t plane() const { return static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]); }
  std::size_t chan_stride() const { return plane() * static_cast<std::size_t>(d[2]); }
};

// o[x] += w0*in[x-1] + w1*in[x] + w2*in[x+1], zero outside [0, nx).
inline void row_fma3(double* __restrict o, const double* __restrict in, double w0, double w1, double w2, int nx) {
  if (nx == 1) {
    o[0] += w1 * in[0];
    return;
  }
  o[0] += w1 * in[0] + w2 * in[1];
  for (int x = 1; x < nx - 1; ++x) o[x] += w0 * in[x - 1] + w1 * in[x] + w2 * in[x + 1];
  o[nx - 1] += w0 * in[nx - 2] + w1 * in[nx - 1];
}

// Same-padded 3x3x3 convolution. Weight layout [oc][ic][dz][dy][dx].
// Each output row is accumulated in a small stack buffer so the 27 tap
// passes stay in L1 instead of re-reading/re-writing the output row.
inline void conv3_forward(const Tensor& in, const double* w, const double* bias, Tensor& out) {
  const int nx = in.d[0], ny = in.d[1], nz = in.d[2];
  const int cin = in.ch, cout = out.ch;
  const std::size_t ps = in.plane(), vs = in.chan_stride();
  std::vector<double> buf(static_cast<std::size_t>(nx));
  for (int z = 0; z < nz; ++z) {
    const int dz_lo = (z == 0) ? 1 : 0, dz_hi = (z == nz - 1) ? 1 : 2;
    for (int y = 0; y < ny; ++y) {
      const int dy_lo = (y == 0) ? 1 : 0, dy_hi = (y == ny - 1) ? 1 : 2;
      const std::size_t row_off = static_cast<std::size_t>(z) * ps + static_cast<std::size_t>(y) * nx;
      for (int oc = 0; oc < cout; ++oc) {
        std::fill(buf.begin(), buf.end(), bias[oc]);
        const double* woc = w + static_cast<std::size_t>(oc) * cin * 27;
        for (int ic = 0; ic < cin; ++ic) {
          const double* icbase = in.v.data() + ic * vs;
          const double* wic = woc + ic * 27;
          for (int dz = dz_lo; dz <= dz_hi; ++dz) {
            const std::size_t zoff = static_cast<std::size_t>(z + dz - 1) * ps;
            for (int dy = dy_lo; dy <= dy_hi; ++dy) {
              const double* irow = icbase + zoff + static_cast<std::size_t>(y + dy - 1) * nx;
              const double* w3 = wic + (dz * 3 + dy) * 3;
              row_fma3(buf.data(), irow, w3[0], w3[1], w3[2], nx);
            }
          }
        }
        std::copy(buf.begin(), buf.end(), out.v.data() + oc * vs + row_off);
      }
    }
  }
}

// Gradient w.r.t. the convolution input (correlation with the flipped kernel).
inline void conv3_backward_input(const Tensor& dout, const double* w, Tensor& din) {
  const int nx = din.d[0], ny = din.d[1], nz = din.d[2];
  const int cin = din.ch, cout = dout.ch;
  const std::size_t ps = din.plane(), vs = din.chan_stride();
  std::vector<double> buf(static_cast<std::size_t>(nx));
  for (int z = 0; z < nz; ++z) {
    const int dz_lo = (z == nz - 1) ? 1 : 0, dz_hi = (z == 0) ? 1 : 2;
    for (int y = 0; y < ny; ++y) {
      const int dy_lo = (y == ny - 1) ? 1 : 0, dy_hi = (y == 0) ? 1 : 2;
      const std::size_t row_off = static_cast<std::size_t>(z) * ps + static_cast<std::size_t>(y) * nx;
      for (int ic = 0; ic < cin; ++ic) {
        std::fill(buf.begin(), buf.end(), 0.0);
        for (int oc = 0; oc < cout; ++oc) {
          const double* ocbase = dout.v.data() + oc * vs;
          const double* wic = w + (static_cast<std::size_t>(oc) * cin + ic) * 27;
          for (int dz = dz_lo; dz <= dz_hi; ++dz) {
            const std::size_t zoff = static_cast<std::size_t>(z - dz + 1) * ps;
            for (int dy = dy_lo; dy <= dy_hi; ++dy) {
              const double* grow = ocbase + zoff + static_cast<std::size_t>(y - dy + 1) * nx;
              const double* w3 = wic + (dz * 3 + dy) * 3;
              row_fma3(buf.data(), grow, w3[2], w3[1], w3[0], nx);
            }
          }
        }
        std::copy(buf.begin(), buf.end(), din.v.data() + ic * vs + row_off);
      }
    }
  }
}

// Accumulates dW/db for a 3x3x3 conv into dw (size cout*cin*27) and db.
inline void conv3_backward_params(const Tensor& in, const Tensor& dout, double* dw, double* db) {
  const int nx = in.d[0], ny = in.d[1], nz = in.d[2];
  const int cin = in.ch, cout = dout.ch;
  const std::size_t ps = in.plane(), vs = in.chan_stride();
  std::vector<double> acc(static_cast<std::size_t>(cin) * 27);
  for (int oc = 0; oc < cout; ++oc) {
    std::fill(acc.begin(), acc.end(), 0.0);
    double bias_acc = 0.0;
    const double* ocbase = dout.v.data() + oc * vs;
    for (int z = 0; z < nz; ++z) {
      const int dz_lo = (z == 0) ? 1 : 0, dz_hi = (z == nz - 1) ? 1 : 2;
      for (int y = 0; y < ny; ++y) {
        const int dy_lo = (y == 0) ? 1 : 0, dy_hi = (y == ny - 1) ? 1 : 2;
        const double* grow = ocbase + static_cast<std::size_t>(z) * ps + static_cast<std::size_t>(y) * nx;
        for (int x = 0; x < nx; ++x) bias_acc += grow[x];
        for (int ic = 0; ic < cin; ++ic) {
          const double* icbase = in.v.data() + ic * vs;
          for (int dz = dz_lo; dz <= dz_hi; ++dz) {
            const std::size_t zoff = static_cast<std::size_t>(z + dz - 1) * ps;
            for (int dy = dy_lo; dy <= dy_hi; ++dy) {
              const double* irow = icbase + zoff + static_cast<std::size_t>(y + dy - 1) * nx;
              double s0 = 0.0, s1 = 0.0, s2 = 0.0;
              if (nx == 1) {
                s1 = irow[0] * grow[0];
              } else {
                s1 += irow[0] * grow[0];
                s2 += irow[1] * grow[0];
                for (int x = 1; x < nx - 1; ++x) {
                  const double g = grow[x];
                  s0 += irow[x - 1] * g;
                  s1 += irow[x] * g;
                  s2 += irow[x + 1] * g;
                }
                s0 += irow[nx - 2] * grow[nx - 1];
                s1 += irow[nx - 1] * grow[nx - 1];
              }
              double* a = acc.data() + (static_cast<std::size_t>(ic) * 9 + dz * 3 + dy) * 3;
              a[0] += s0;
              a[1] += s1;
              a[2] += s2;
            }
          }
        }
      }
    }
    double* dwoc = dw + static_cast<std::size_t>(oc) * cin * 27;
    for (std::size_t i = 0; i < acc.size(); ++i) dwoc[i] += acc[i];
    db[oc] += bias_acc;
  }
}

inline void conv1_forward(const Tensor& in, const double* w, const double* bias, Tensor& out) {
  const std::size_t n = voxel_count(in.d);
  for (int oc = 0; oc < out.ch; ++oc) {
    double* o = out.v.data() + oc * n;
    std::fill(o, o + n, bias[oc]);
    for (int ic = 0; ic < in.ch; ++ic) {
      const double wv = w[oc * in.ch + ic];
      const double* i = in.v.data() + ic * n;
      for (std::size_t x = 0; x < n; ++x) o[x] += wv * i[x];
    }
  }
}

inline void conv1_backward(const Tensor& in, const Tensor& dout, const double* w, double* dw, double* db,
                           Tensor& din) {
  const std::size_t n = voxel_count(in.d);
  std::fill(din.v.begin(), din.v.end(), 0.0);
  for (int oc = 0; oc < dout.ch; ++oc) {
    const double* g = dout.v.data() + oc * n;
    double bias_acc = 0.0;
    for (std::size_t x = 0; x < n; ++x) bias_acc += g[x];
    db[oc] += bias_acc;
    for (int ic = 0; ic < in.ch; ++ic) {
      const double* i = in.v.data() + ic * n;
      double* d = din.v.data() + ic * n;
      const double wv = w[oc * in.ch + ic];
      double wacc = 0.0;
      for (std::size_t x = 0; x < n; ++x) {
        wacc += i[x] * g[x];
        d[x] += wv * g[x];
      }
      dw[oc * in.ch + ic] += wacc;
    }
  }
}

inline void leaky_relu_inplace(Tensor& t, double slope) {
  for (double& x : t.v)
    if (x < 0.0) x *= slope;
}

// Uses the post-activation value to recover the branch (slope > 0 keeps sign).
inline void leaky_relu_backward_inplace(Tensor& grad, const Tensor& post, double slope) {
  for (std::size_t i = 0; i < grad.v.size(); ++i)
    if (!(post.v[i] > 0.0)) grad.v[i] *= slope;
}

inline Tensor avgpool2(const Tensor& in) {
  Tensor out(in.ch, {in.d[0] / 2, in.d[1] / 2, in.d[2] / 2});
  const std::size_t ips = in.plane(), ivs = in.chan_stride();
  const std::size_t ops = out.plane(), ovs = out.chan_stride();
  for (int c = 0; c < in.ch; ++c)
    for (int z = 0; z < out.d[2]; ++z)
      for (int y = 0; y < out.d[1]; ++y) {
        const double* r00 = in.v.data() + c * ivs + (2 * z) * ips + static_cast<std::size_t>(2 * y) * in.d[0];
        const double* r01 = r00 + in.d[0];
        const double* r10 = r00 + ips;
        const double* r11 = r10 + in.d[0];
        double* o = out.v.data() + c * ovs + z * ops + static_cast<std::size_t>(y) * out.d[0];
        for (int x = 0; x < out.d[0]; ++x) {
          const int i = 2 * x;
          o[x] = 0.125 * (r00[i] + r00[i + 1] + r01[i] + r01[i + 1] + r10[i] + r10[i + 1] + r11[i] + r11[i + 1]);
        }
      }
  return out;
}

inline Tensor avgpool2_backward(const Tensor& dout, const Index3& in_dims) {
  Tensor din(dout.ch, in_dims);
  const std::size_t ips = din.plane(), ivs = din.chan_stride();
  const std::size_t ops = dout.plane(), ovs = dout.chan_stride();
  for (int c = 0; c < dout.ch; ++c)
    for (int z = 0; z < dout.d[2]; ++z)
      for (int y = 0; y < dout.d[1]; ++y) {
        const double* g = dout.v.data() + c * ovs + z * ops + static_cast<std::size_t>(y) * dout.d[0];
        double* r00 = din.v.data() + c * ivs + (2 * z) * ips + static_cast<std::size_t>(2 * y) * in_dims[0];
        double* r01 = r00 + in_dims[0];
        double* r10 = r00 + ips;
        double* r11 = r10 + in_dims[0];
        for (int x = 0; x < dout.d[0]; ++x) {
          const double v = 0.125 * g[x];
          const int i = 2 * x;
          r00[i] = v;
          r00[i + 1] = v;
          r01[i] = v;
          r01[i + 1] = v;
          r10[i] = v;
          r10[i + 1] = v;
          r11[i] = v;
          r11[i + 1] = v;
        }
      }
  return din;
}

inline Tensor upsample2_nearest(const Tensor& in) {
  Tensor out(in.ch, {in.d[0] * 2, in.d[1] * 2, in.d[2] * 2});
  const std::size_t ips = in.plane(), ivs = in.chan_stride();
  const std::size_t ops = out.plane(), ovs = out.chan_stride();
  for (int c = 0; c < in.ch; ++c)
    for (int z = 0; z < out.d[2]; ++z)
      for (int y = 0; y < out.d[1]; ++y) {
        const double* i = in.v.data() + c * ivs + (z / 2) * ips + static_cast<std::size_t>(y / 2) * in.d[0];
        double* o = out.v.data() + c * ovs + z * ops + static_cast<std::size_t>(y) * out.d[0];
        for (int x = 0; x < out.d[0]; ++x) o[x] = i[x / 2];
      }
  return out;
}

inline Tensor upsample2_backward(const Tensor& dout) {
  Tensor din(dout.ch, {dout.d[0] / 2, dout.d[1] / 2, dout.d[2] / 2});
  const std::size_t ips = din.plane(), ivs = din.chan_stride();
  const std::size_t ops = dout.plane(), ovs = dout.chan_stride();
  for (int c = 0; c < dout.ch; ++c)
    for (int z = 0; z < dout.d[2]; ++z)
      for (int y = 0; y < dout.d[1]; ++y) {
        const double* g = dout.v.data() + c * ovs + z * ops + static_cast<std::size_t>(y) * dout.d[0];
        double* d = din.v.data() + c * ivs + (z / 2) * ips + static_cast<std::size_t>(y / 2) * din.d[0];
        for (int x = 0; x < dout.d[0]; ++x) d[x / 2] += g[x];
      }
  return din;
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
  Tensor out(a.ch + b.ch, a.d);
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.v.size());
  return out;
}

}  // namespace detail

// Activations saved by the forward pass: per conv layer its input tensor and
// its post-activation output (the final layer's output is the raw logit grid).
struct ForwardTrace {
  std::vector<detail::Tensor> conv_in;
  std::vector<detail::Tensor> conv_out;

  const detail::Tensor& logits() const { return conv_out.back(); }
};

namespace detail {

struct ParamView {
  const double* w;
  const double* b;
};

inline std::vector<std::size_t> layer_offsets(const std::vector<LayerShape>& shapes) {
  std::vector<std::size_t> off(shapes.size());
  std::size_t o = 0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    off[i] = o;
    o += shapes[i].param_count();
  }
  return off;
}

inline void check_params(const ModelParams& p, const NetConfig& cfg) {
  const auto shapes = layer_shapes(cfg);
  if (p.shapes.size() != shapes.size() || p.values.size() != param_count(shapes))
    throw config_error("model parameters do not match network config");
}

inline void check_patch_dims(const NetConfig& cfg, const Index3& dims) {
  const int divisor = 1 << cfg.levels;
  for (int a = 0; a < 3; ++a)
    if (dims[a] % divisor != 0)
      throw config_error("patch dims must be divisible by 2^levels (" + std::to_string(divisor) + ")");
}

inline Tensor tensor_from_volume(const Volume& v) {
  Tensor t(1, v.dims);
  std::copy(v.data.begin(), v.data.end(), t.v.begin());
  return t;
}

}  // namespace detail

inline ForwardTrace forward_trace(const ModelParams& params, const NetConfig& cfg, detail::Tensor input) {
  detail::check_params(params, cfg);
  detail::check_patch_dims(cfg, input.d);
  const auto offsets = detail::layer_offsets(params.shapes);
  const int n_convs = static_cast<int>(params.shapes.size());

  ForwardTrace tr;
  tr.conv_in.resize(n_convs);
  tr.conv_out.resize(n_convs);

  int idx = 0;
  auto run_conv = [&](detail::Tensor in, bool activate) -> detail::Tensor {
    const LayerShape& s = params.shapes[idx];
    const double* w = params.values.data() + offsets[idx];
    const double* b = w + s.weight_count();
    detail::Tensor out(s.out_ch, in.d);
    if (s.kernel == 3)
      detail::conv3_forward(in, w, b, out);
    else
      detail::conv1_forward(in, w, b, out);
    if (activate) detail::leaky_relu_inplace(out, cfg.leaky_slope);
    tr.conv_in[idx] = std::move(in);
    tr.conv_out[idx] = out;
    ++idx;
    return out;
  };

  std::vector<int> skip_idx(cfg.levels, -1);
  detail::Tensor cur = std::move(input);
  for (int l = 0; l < cfg.levels; ++l) {
    if (l > 0) cur = detail::avgpool2(cur);
    cur = run_conv(std::move(cur), true);
    skip_idx[l] = idx;  // index of the b-block about to run
    cur = run_conv(std::move(cur), true);
  }
  for (int l = cfg.levels - 2; l >= 0; --l) {
    cur = detail::upsample2_nearest(cur);
    cur = run_conv(std::move(cur), true);
    cur = detail::concat(tr.conv_out[skip_idx[l]], cur);
    cur = run_conv(std::move(cur), true);
    cur = run_conv(std::move(cur), true);
  }
  run_conv(std::move(cur), false);  // logit head
  return tr;
}

// Backpropagates dL/dlogit through the trace; returns dL/dparams (flat, same
// layout as ModelParams::values).
inline std::vector<double> backward_from_trace(const ModelParams& params, const NetConfig& cfg,
                                               const ForwardTrace& trace, const std::vector<double>& dlogits) {
  detail::check_params(params, cfg);
  if (dlogits.size() != trace.logits().v.size()) throw config_error("backward: gradient shape mismatch");
  const auto offsets = detail::layer_offsets(params.shapes);
  std::vector<double> grad(params.values.size(), 0.0);

  int idx = static_cast<int>(params.shapes.size()) - 1;
  // Propagates through conv layer `idx` (post-activation grad in `g`),
  // accumulates its parameter gradients, and returns grad w.r.t. its input.
  auto back_conv = [&](detail::Tensor g, bool activated, bool need_input_grad) -> detail::Tensor {
    const LayerShape& s = params.shapes[idx];
    const double* w = params.values.data() + offsets[idx];
    double* dw = grad.data() + offsets[idx];
    double* db = dw + s.weight_count();
    if (activated) detail::leaky_relu_backward_inplace(g, trace.conv_out[idx], cfg.leaky_slope);
    detail::Tensor din(s.in_ch, g.d);
    if (s.kernel == 3) {
      detail::conv3_backward_params(trace.conv_in[idx], g, dw, db);
      if (need_input_grad) detail::conv3_backward_input(g, w, din);
    } else {
      detail::conv1_backward(trace.conv_in[idx], g, w, dw, db, din);
    }
    --idx;
    return din;
  };

  // Mirror of the forward structure, walked in reverse.
  detail::Tensor g(1, trace.logits().d);
  std::copy(dlogits.begin(), dlogits.end(), g.v.begin());
  g = back_conv(std::move(g), false, true);  // logit head

  std::vector<detail::Tensor> skip_grad(cfg.levels);
  for (int l = 0; l < cfg.levels - 1; ++l) {
    g = back_conv(std::move(g), true, true);  // dec{l}b
    g = back_conv(std::move(g), true, true);  // dec{l}a -> grad w.r.t. concat
    const int c = level_channels(cfg, l);
    detail::Tensor skip(c, g.d), up(c, g.d);
    std::copy(g.v.begin(), g.v.begin() + skip.v.size(), skip.v.begin());
    std::copy(g.v.begin() + skip.v.size(), g.v.end(), up.v.begin());
    skip_grad[l] = std::move(skip);
    g = back_conv(std::move(up), true, true);  // up{l}
    g = detail::upsample2_backward(g);
  }
  for (int l = cfg.levels - 1; l >= 0; --l) {
    if (l < cfg.levels - 1)
      for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += skip_grad[l].v[i];
    g = back_conv(std::move(g), true, true);        // enc{l}b
    g = back_conv(std::move(g), true, l > 0);       // enc{l}a
    if (l > 0) g = detail::avgpool2_backward(g, trace.conv_in[2 * (l - 1) + 1].d);
  }
  return grad;
}

// Full-volume-free functional API: logit grid for one patch.
inline Prediction forward(const ModelParams& params, const NetConfig& cfg, const Volume& patch) {
  ForwardTrace tr = forward_trace(params, cfg, detail::tensor_from_volume(patch));
  Volume logits(patch.dims, patch.spacing, std::move(tr.conv_out.back().v));
  return prediction_from_logits(std::move(logits));
}

// dL/dparams for a loss expressed as dL/dp (p = foreground probability).
// Reruns the forward pass internally; the trainer uses the trace variants.
inline std::vector<double> backward(const ModelParams& params, const NetConfig& cfg, const Volume& patch,
                                    const std::vector<double>& dloss_dprob) {
  if (dloss_dprob.size() != patch.data.size()) throw config_error("backward: gradient shape mismatch");
  ForwardTrace tr = forward_trace(params, cfg, detail::tensor_from_volume(patch));
  const auto& logits = tr.logits().v;
  std::vector<double> dlogits(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    dlogits[i] = dloss_dprob[i] * p * (1.0 - p);
  }
  return backward_from_trace(params, cfg, tr, dlogits);
}

}  // namespace imbseg
