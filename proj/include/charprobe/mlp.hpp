#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "charprobe/error.hpp"
#include "charprobe/rng.hpp"

namespace charprobe {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

template <typename T>
struct MlpParams {
  Matrix<T> w1, w2, w3;
  Vector<T> b1, b2, b3;

  // Visits (param, other) block pairs in a fixed order.
  template <typename F>
  void zip(MlpParams& other, F&& f) {
    f(w1.data(), other.w1.data(), w1.size());
    f(b1.data(), other.b1.data(), b1.size());
    f(w2.data(), other.w2.data(), w2.size());
    f(b2.data(), other.b2.data(), b2.size());
    f(w3.data(), other.w3.data(), w3.size());
    f(b3.data(), other.b3.data(), b3.size());
  }

  template <typename F>
  void each(F&& f) {
    f(w1.data(), w1.size());
    f(b1.data(), b1.size());
    f(w2.data(), w2.size());
    f(b2.data(), b2.size());
    f(w3.data(), w3.size());
    f(b3.data(), b3.size());
  }

  std::size_t count() const {
    return std::size_t(w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size());
  }

  MlpParams zeros_like() const {
    MlpParams z;
    z.w1 = Matrix<T>::Zero(w1.rows(), w1.cols());
    z.w2 = Matrix<T>::Zero(w2.rows(), w2.cols());
    z.w3 = Matrix<T>::Zero(w3.rows(), w3.cols());
    z.b1 = Vector<T>::Zero(b1.size());
    z.b2 = Vector<T>::Zero(b2.size());
    z.b3 = Vector<T>::Zero(b3.size());
    return z;
  }
};

/// Activations kept from a forward pass for the backward pass.
template <typename T>
struct MlpCache {
  Matrix<T> input, pre1, act1, act2, dropped, mask, logits;
};

/// linear(d_in→h1)·SELU → linear(h1→h2)·Tanh → dropout → linear(h2→out).
/// Batches are column-major: one example per column.
template <typename T>
class Mlp {
 public:
  Mlp() = default;

  Mlp(int d_in, int h1, int h2, int out, double dropout = 0.1) : dropout_(dropout) {
    p_.w1 = Matrix<T>::Zero(h1, d_in);
    p_.b1 = Vector<T>::Zero(h1);
    p_.w2 = Matrix<T>::Zero(h2, h1);
    p_.b2 = Vector<T>::Zero(h2);
    p_.w3 = Matrix<T>::Zero(out, h2);
    p_.b3 = Vector<T>::Zero(out);
  }

  int d_in() const { return int(p_.w1.cols()); }
  int h1() const { return int(p_.w1.rows()); }
  int h2() const { return int(p_.w2.rows()); }
  int out() const { return int(p_.w3.rows()); }
  double dropout() const { return dropout_; }
  void set_dropout(double p) { dropout_ = p; }

  MlpParams<T>& params() { return p_; }
  const MlpParams<T>& params() const { return p_; }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  void init(Rng& rng) {
    auto fill = [&](auto& m, double fan_in) {
      std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(u(rng));
    };
    fill(p_.w1, double(d_in()));
    fill(p_.b1, double(d_in()));
    fill(p_.w2, double(h1()));
    fill(p_.b2, double(h1()));
    fill(p_.w3, double(h2()));
    fill(p_.b3, double(h2()));
  }

  /// `dropout_rng` null means evaluation mode (no dropout).
  Matrix<T> forward(const Matrix<T>& x, MlpCache<T>* cache = nullptr, Rng* dropout_rng = nullptr) const {
    Matrix<T> pre1 = (p_.w1 * x).colwise() + p_.b1;
    Matrix<T> act1 = pre1.unaryExpr([](T a) {
      return a > T(0) ? T(kSeluLambda) * a : T(kSeluLambda * kSeluAlpha) * (std::exp(a) - T(1));
    });
    Matrix<T> act2 = ((p_.w2 * act1).colwise() + p_.b2).array().tanh().matrix();
    Matrix<T> mask;
    Matrix<T> dropped;
    if (dropout_rng && dropout_ > 0.0) {
      mask.resize(act2.rows(), act2.cols());
      std::bernoulli_distribution keep(1.0 - dropout_);
      const T scale = T(1.0 / (1.0 - dropout_));
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*dropout_rng) ? scale : T(0);
      dropped = act2.cwiseProduct(mask);
    } else {
      dropped = act2;
    }
    Matrix<T> logits = (p_.w3 * dropped).colwise() + p_.b3;
    if (cache) {
      cache->input = x;
      cache->pre1 = std::move(pre1);
      cache->act1 = std::move(act1);
      cache->act2 = std::move(act2);
      cache->mask = std::move(mask);
      cache->dropped = std::move(dropped);
      cache->logits = logits;
    }
    return logits;
  }

  /// Accumulates parameter gradients into `grads` given dLoss/dLogits and
  /// returns dLoss/dInput.
  Matrix<T> backward(const MlpCache<T>& c, const Matrix<T>& d_logits, MlpParams<T>& grads) const {
    grads.w3.noalias() += d_logits * c.dropped.transpose();
    grads.b3 += d_logits.rowwise().sum();
    Matrix<T> d_act2 = p_.w3.transpose() * d_logits;
    if (c.mask.size() > 0) d_act2 = d_act2.cwiseProduct(c.mask);
    Matrix<T> d_pre2 = d_act2.cwiseProduct((T(1) - c.act2.array().square()).matrix());
    grads.w2.noalias() += d_pre2 * c.act1.transpose();
    grads.b2 += d_pre2.rowwise().sum();
    Matrix<T> d_act1 = p_.w2.transpose() * d_pre2;
    Matrix<T> d_pre1 = d_act1.binaryExpr(c.pre1, [](T g, T a) {
      return a > T(0) ? g * T(kSeluLambda) : g * T(kSeluLambda * kSeluAlpha) * std::exp(a);
    });
    grads.w1.noalias() += d_pre1 * c.input.transpose();
    grads.b1 += d_pre1.rowwise().sum();
    return p_.w1.transpose() * d_pre1;
  }

  template <typename U>
  Mlp<U> cast() const {
    Mlp<U> m(d_in(), h1(), h2(), out(), dropout_);
    auto& q = m.params();
    q.w1 = p_.w1.template cast<U>();
    q.w2 = p_.w2.template cast<U>();
    q.w3 = p_.w3.template cast<U>();
    q.b1 = p_.b1.template cast<U>();
    q.b2 = p_.b2.template cast<U>();
    q.b3 = p_.b3.template cast<U>();
    return m;
  }

  bool all_finite() const {
    return p_.w1.allFinite() && p_.w2.allFinite() && p_.w3.allFinite() && p_.b1.allFinite() &&
           p_.b2.allFinite() && p_.b3.allFinite();
  }

 private:
  MlpParams<T> p_;
  double dropout_ = 0.1;
};

/// Adam with bias-corrected moments. Parameter blocks are addressed by the
/// order in which they are passed to `update` within a step.
template <typename T>
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void begin_step() {
    ++t_;
    block_ = 0;
  }

  void update(T* param, const T* grad, std::size_t n) {
    if (block_ == m_.size()) {
      m_.emplace_back(n, 0.0);
      v_.emplace_back(n, 0.0);
    }
    auto& m = m_[block_];
    auto& v = v_[block_];
    ++block_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < n; ++i) {
      double g = double(grad[i]) + weight_decay_ * double(param[i]);
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      param[i] = T(double(param[i]) - lr_ * m_hat / (std::sqrt(v_hat) + eps_));
    }
  }

  long step_count() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::size_t block_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline constexpr char kCheckpointMagic[4] = {'M', 'L', 'P', '1'};

/// Checkpoint: "MLP1", u32 d_in/h1/h2/out, then w1 b1 w2 b2 w3 b3 as
/// little-endian float32 (weights row-major).
inline void save_checkpoint(const Mlp<float>& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(kCheckpointMagic, 4);
  for (int d : {model.d_in(), model.h1(), model.h2(), model.out()}) {
    auto v = static_cast<std::uint32_t>(d);
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  const auto& p = model.params();
  auto write_mat = [&](const Matrix<float>& m) {
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = m;
    out.write(reinterpret_cast<const char*>(r.data()), std::streamsize(r.size() * sizeof(float)));
  };
  auto write_vec = [&](const Vector<float>& v) {
    out.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * sizeof(float)));
  };
  write_mat(p.w1);
  write_vec(p.b1);
  write_mat(p.w2);
  write_vec(p.b2);
  write_mat(p.w3);
  write_vec(p.b3);
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

inline Mlp<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kCheckpointMagic, 4))
    throw Error(ErrorCode::BadMagic, path.string() + ": expected \"MLP1\" at byte offset 0");
  std::uint32_t dims[4];
  if (!in.read(reinterpret_cast<char*>(dims), sizeof dims))
    throw Error(ErrorCode::TruncatedFile, path.string() + ": header truncated");
  Mlp<float> model{int(dims[0]), int(dims[1]), int(dims[2]), int(dims[3])};
  auto& p = model.params();
  auto read_mat = [&](Matrix<float>& m) {
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r(m.rows(), m.cols());
    if (!in.read(reinterpret_cast<char*>(r.data()), std::streamsize(r.size() * sizeof(float))))
      throw Error(ErrorCode::TruncatedFile, path.string() + ": parameters truncated");
    m = r;
  };
  auto read_vec = [&](Vector<float>& v) {
    if (!in.read(reinterpret_cast<char*>(v.data()), std::streamsize(v.size() * sizeof(float))))
      throw Error(ErrorCode::TruncatedFile, path.string() + ": parameters truncated");
  };
  read_mat(p.w1);
  read_vec(p.b1);
  read_mat(p.w2);
  read_vec(p.b2);
  read_mat(p.w3);
  read_vec(p.b3);
  if (!model.all_finite()) throw Error(ErrorCode::NonFiniteValue, path.string() + ": non-finite parameter");
  return model;
}

}  // namespace charprobe
