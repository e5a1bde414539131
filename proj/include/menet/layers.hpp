#pragma once

#include <vector>

#include "menet/autodiff.hpp"

namespace menet {

/// Geometry of a square-kernel convolution with symmetric zero padding.
struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  /// Output extent for an input extent, or throws if the geometry does not
  /// preserve (stride 1) or exactly halve (stride 2) the size.
  std::size_t output_extent(std::size_t in) const;
};

/// Convolution (cross-correlation). x: N x Cin x H x W, weight: Cout x Cin x k x k,
/// bias: Cout.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, ConvGeometry geo);

/// Transposed convolution: the adjoint of `conv2d` with the same geometry,
/// mapping H x W to (stride*H) x (stride*W). weight: Cin x Cout x k x k
/// (layout of the adjoint convolution's kernel), bias: Cout.
template <typename T>
Var<T> deconv2d(Var<T> x, Var<T> weight, Var<T> bias, ConvGeometry geo);

enum class Mode { train, inference };

template <typename T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.9;  // weight kept on the old running statistic
};

/// Per-channel batch normalization. In train mode the batch statistics are
/// used and, when `batch_stats` is non-null, written there (variance
/// unbiased) so the caller can fold them into the running statistics. In
/// inference mode `running` is used and the op is affine in x.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormStats<T>& running, Mode mode,
                  BatchNormOptions opts = {}, BatchNormStats<T>* batch_stats = nullptr);

/// running <- momentum * running + (1 - momentum) * batch
template <typename T>
void update_running_stats(BatchNormStats<T>& running, const BatchNormStats<T>& batch, double momentum);

template <typename T>
Var<T> relu(Var<T> x);

/// Channel softmax over exactly two channels.
template <typename T>
Var<T> softmax2(Var<T> x);

/// Nearest-neighbour block replication: every input value fills an n x n
/// output block.
template <typename T>
Var<T> replicate_upsample(Var<T> x, int n);

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs);

/// 2x2 stride-2 max pooling. Not part of the network; kept as a fixture for
/// bound analysis.
template <typename T>
Var<T> max_pool2(Var<T> x);

}  // namespace menet
