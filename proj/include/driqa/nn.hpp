#pragma once

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "driqa/autodiff.hpp"
#include "driqa/rng.hpp"

namespace driqa::nn {

enum class Init { kZero, kOne, kKaiming };

// Named parameter registry. Initialization is keyed by (seed, full name), so
// adding or removing an unrelated module never shifts another module's
// initial weights -- ablation configs stay step-0 comparable.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0, bool trainable = true)
      : key_(rng::Key{rng::mix(seed)}.sub("params")), trainable_(trainable) {}

  ad::Var create(const std::string& name, std::vector<std::size_t> shape, Init init,
                 std::size_t fan_in = 0) {
    require(find(name) == nullptr, "param store: duplicate parameter " + name);
    Tensor t(std::move(shape));
    switch (init) {
      case Init::kZero:
        break;
      case Init::kOne:
        std::fill(t.storage().begin(), t.storage().end(), 1.0);
        break;
      case Init::kKaiming: {
        require(fan_in > 0, "param store: kaiming init needs fan_in");
        rng::Stream s(key_.sub(name));
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (auto& v : t.storage()) v = s.uniform(-bound, bound);
        break;
      }
    }
    ad::Var v = ad::make_var(std::move(t), trainable_);
    params_.emplace_back(name, v);
    return v;
  }

  ad::Var find(const std::string& name) const {
    for (const auto& [n, v] : params_)
      if (n == name) return v;
    return nullptr;
  }

  const std::vector<std::pair<std::string, ad::Var>>& params() const { return params_; }
  std::size_t count() const { return params_.size(); }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v->value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [_, v] : params_) {
      v->has_grad = false;
      v->grad = Tensor();
    }
  }

  // Byte-level fingerprint of all parameter values, for frozen-copy checks.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, v] : params_) {
      h ^= fnv1a(name);
      h *= 1099511628211ull;
      const auto& s = v->value.storage();
      const unsigned char* bytes = reinterpret_cast<const unsigned char*>(s.data());
      for (std::size_t i = 0; i < s.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    }
    return h;
  }

  void save(std::ostream& os) const {
    const std::uint64_t n = params_.size();
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (const auto& [name, v] : params_) {
      const std::uint64_t len = name.size();
      os.write(reinterpret_cast<const char*>(&len), sizeof(len));
      os.write(name.data(), static_cast<std::streamsize>(len));
      const std::uint64_t cnt = v->value.numel();
      os.write(reinterpret_cast<const char*>(&cnt), sizeof(cnt));
      os.write(reinterpret_cast<const char*>(v->value.data()),
               static_cast<std::streamsize>(cnt * sizeof(double)));
    }
  }

  // Loads values into an already-constructed store; names, order and sizes
  // must match exactly.
  void load(std::istream& is) {
    std::uint64_t n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    require(is.good() && n == params_.size(), "param store: parameter count mismatch");
    for (auto& [name, v] : params_) {
      std::uint64_t len = 0;
      is.read(reinterpret_cast<char*>(&len), sizeof(len));
      std::string got(len, '\0');
      is.read(got.data(), static_cast<std::streamsize>(len));
      require(got == name, "param store: parameter name mismatch: expected " + name +
                               ", found " + got);
      std::uint64_t cnt = 0;
      is.read(reinterpret_cast<char*>(&cnt), sizeof(cnt));
      require(cnt == v->value.numel(), "param store: size mismatch for " + name);
      is.read(reinterpret_cast<char*>(v->value.data()),
              static_cast<std::streamsize>(cnt * sizeof(double)));
      require(is.good(), "param store: truncated parameter data");
    }
  }

  // Copies values from a same-layout store (frozen snapshots, EMA source).
  void copy_values_from(const ParamStore& other) {
    require(params_.size() == other.params_.size(), "param store: layout mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      require(params_[i].first == other.params_[i].first, "param store: layout mismatch");
      params_[i].second->value = other.params_[i].second->value;
    }
  }

  // EMA update: theta <- m*theta + (1-m)*src.
  void ema_update_from(const ParamStore& other, double momentum) {
    require(params_.size() == other.params_.size(), "param store: layout mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& dst = params_[i].second->value;
      const auto& src = other.params_[i].second->value;
      for (std::size_t j = 0; j < dst.numel(); ++j)
        dst[j] = momentum * dst[j] + (1.0 - momentum) * src[j];
    }
  }

 private:
  rng::Key key_;
  bool trainable_;
  std::vector<std::pair<std::string, ad::Var>> params_;
};

// ----------------------------------------------------------------------
// Layers
// ----------------------------------------------------------------------

struct Conv2d {
  ad::Var w, b;
  std::size_t stride = 1, pad = 1;

  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, std::size_t cin, std::size_t cout,
         std::size_t k, std::size_t stride_, std::size_t pad_, bool bias = true)
      : stride(stride_), pad(pad_) {
    w = ps.create(name + ".w", {cout, cin, k, k}, Init::kKaiming, cin * k * k);
    if (bias) b = ps.create(name + ".b", {cout}, Init::kZero);
  }

  ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

struct Linear {
  ad::Var w, b;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
         bool bias = true, bool zero_init = false) {
    w = ps.create(name + ".w", {out, in}, zero_init ? Init::kZero : Init::kKaiming, in);
    if (bias) b = ps.create(name + ".b", {out}, Init::kZero);
  }

  ad::Var operator()(const ad::Var& x) const { return ad::linear(x, w, b); }
};

struct GroupNorm {
  ad::Var gamma, beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamStore& ps, const std::string& name, std::size_t channels,
            std::size_t groups_) : groups(groups_) {
    gamma = ps.create(name + ".gamma", {channels}, Init::kOne);
    beta = ps.create(name + ".beta", {channels}, Init::kZero);
  }

  ad::Var operator()(const ad::Var& x) const { return ad::group_norm(x, gamma, beta, groups); }
};

struct LayerNorm {
  ad::Var gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::size_t channels) {
    gamma = ps.create(name + ".gamma", {channels}, Init::kOne);
    beta = ps.create(name + ".beta", {channels}, Init::kZero);
  }

  ad::Var operator()(const ad::Var& x) const { return ad::layer_norm(x, gamma, beta); }
};

// NAFNet-style gate: split channels, multiply halves.
inline ad::Var simple_gate(const ad::Var& x) {
  const std::size_t C = x->value.dim(1);
  require(C % 2 == 0, "simple_gate: odd channel count");
  return ad::mul(ad::slice_channels(x, 0, C / 2), ad::slice_channels(x, C / 2, C));
}

// Residual gated conv block: x + proj(gate(expand(norm(x)))).
struct GatedConvBlock {
  GroupNorm norm;
  Conv2d expand, project;

  GatedConvBlock() = default;
  GatedConvBlock(ParamStore& ps, const std::string& name, std::size_t c,
                 std::size_t groups = 4)
      : norm(ps, name + ".norm", c, groups),
        expand(ps, name + ".expand", c, 2 * c, 3, 1, 1),
        project(ps, name + ".project", c, c, 3, 1, 1) {}

  ad::Var operator()(const ad::Var& x) const {
    return ad::add(x, project(simple_gate(expand(norm(x)))));
  }
};

// Pre-norm multi-head attention over token tensors (B,T,C). force_uniform
// collapses the attention matrix to 1/Tk, an ablation used by tests.
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  std::size_t heads = 1, channels = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, std::size_t c,
                     std::size_t heads_)
      : wq(ps, name + ".wq", c, c), wk(ps, name + ".wk", c, c), wv(ps, name + ".wv", c, c),
        wo(ps, name + ".wo", c, c), heads(heads_), channels(c) {
    require(c % heads_ == 0, "attention: channels not divisible by heads");
  }

  ad::Var operator()(const ad::Var& q_tokens, const ad::Var& kv_tokens,
                     bool force_uniform = false) const {
    const std::size_t B = q_tokens->value.dim(0), Tq = q_tokens->value.dim(1);
    const std::size_t Tk = kv_tokens->value.dim(1), C = channels, H = heads, dh = C / H;
    auto split_heads = [&](const ad::Var& t, std::size_t T) {
      auto x = ad::reshape(t, {B * T, C});
      return x;
    };
    auto to_bh = [&](const ad::Var& proj, std::size_t T) {
      // (B*T,C) -> (B,T,H,dh) -> (B,H,T,dh) -> (B*H,T,dh)
      auto r = ad::reshape(proj, {B, T, H, dh});
      return ad::reshape(ad::transpose_12(r), {B * H, T, dh});
    };
    auto q = to_bh(wq(split_heads(q_tokens, Tq)), Tq);
    auto k = to_bh(wk(split_heads(kv_tokens, Tk)), Tk);
    auto v = to_bh(wv(split_heads(kv_tokens, Tk)), Tk);
    ad::Var attn;
    if (force_uniform) {
      attn = ad::constant(Tensor::full({B * H, Tq, Tk}, 1.0 / static_cast<double>(Tk)));
    } else {
      auto logits = ad::scale(ad::bmm(q, k, /*trans_b=*/true),
                              1.0 / std::sqrt(static_cast<double>(dh)));
      attn = ad::softmax_lastdim(logits);
    }
    auto ctx = ad::bmm(attn, v);  // (B*H,Tq,dh)
    auto merged = ad::reshape(ad::transpose_12(ad::reshape(ctx, {B, H, Tq, dh})), {B * Tq, C});
    return ad::reshape(wo(merged), {B, Tq, C});
  }
};

struct TokenMlp {
  Linear fc1, fc2;

  TokenMlp() = default;
  TokenMlp(ParamStore& ps, const std::string& name, std::size_t c, std::size_t hidden)
      : fc1(ps, name + ".fc1", c, hidden), fc2(ps, name + ".fc2", hidden, c) {}

  ad::Var operator()(const ad::Var& tokens) const {
    const auto B = tokens->value.dim(0), T = tokens->value.dim(1), C = tokens->value.dim(2);
    auto x = ad::reshape(tokens, {B * T, C});
    x = fc2(ad::silu(fc1(x)));
    return ad::reshape(x, {B, T, x->value.dim(1)});
  }
};

// ----------------------------------------------------------------------
// Optimizer & schedule
// ----------------------------------------------------------------------

// ADAM with decoupled-from-nothing classic L2 weight decay added to the
// gradient, plus optional global-norm clipping.
class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void step(ParamStore& ps, double lr, double weight_decay, double clip_norm) {
    if (m_.empty()) {
      m_.resize(ps.count());
      v_.resize(ps.count());
      for (std::size_t i = 0; i < ps.count(); ++i) {
        m_[i] = Tensor::zeros(ps.params()[i].second->value.shape());
        v_[i] = Tensor::zeros(ps.params()[i].second->value.shape());
      }
    }
    require(m_.size() == ps.count(), "adam: parameter set changed under the optimizer");
    ++t_;
    double clip_scale = 1.0;
    if (clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [_, p] : ps.params())
        if (p->has_grad)
          for (std::size_t i = 0; i < p->grad.numel(); ++i) sq += p->grad[i] * p->grad[i];
      const double norm = std::sqrt(sq);
      if (norm > clip_norm) clip_scale = clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < ps.count(); ++i) {
      auto& p = ps.params()[i].second;
      if (!p->has_grad) continue;
      auto& th = p->value;
      for (std::size_t j = 0; j < th.numel(); ++j) {
        const double g = p->grad[j] * clip_scale + weight_decay * th[j];
        m_[i][j] = beta1 * m_[i][j] + (1.0 - beta1) * g;
        v_[i][j] = beta2 * v_[i][j] + (1.0 - beta2) * g * g;
        th[j] -= lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps);
      }
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

// Cosine annealing: lr(e) = eta_min + (lr0-eta_min)*(1+cos(pi*e/t_max))/2.
inline double cosine_lr(double lr0, double eta_min, std::int64_t epoch, std::int64_t t_max) {
  require(t_max > 0, "cosine_lr: t_max must be positive");
  const double phase = 3.14159265358979323846 * static_cast<double>(epoch) /
                       static_cast<double>(t_max);
  return eta_min + (lr0 - eta_min) * (1.0 + std::cos(phase)) / 2.0;
}

}  // namespace driqa::nn
