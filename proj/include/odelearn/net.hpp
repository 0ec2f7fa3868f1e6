#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "odelearn/errors.hpp"
#include "odelearn/io.hpp"
#include "odelearn/rng.hpp"

namespace odelearn {

/// Elementwise transform applied to the raw network output, guarding against
/// unbounded learned derivatives.
enum class Wrapper { None, TanhBound, Squared, Clamp };

inline const char* to_string(Wrapper w) {
  switch (w) {
    case Wrapper::None: return "none";
    case Wrapper::TanhBound: return "tanh_bound";
    case Wrapper::Squared: return "squared";
    case Wrapper::Clamp: return "clamp";
  }
  return "unknown";
}

inline Wrapper wrapper_from_string(std::string_view s) {
  if (s == "none") return Wrapper::None;
  if (s == "tanh_bound") return Wrapper::TanhBound;
  if (s == "squared") return Wrapper::Squared;
  if (s == "clamp") return Wrapper::Clamp;
  throw ConfigError("unknown wrapper '" + std::string(s) + "'");
}

inline double default_wrapper_bound(Wrapper w) {
  return w == Wrapper::TanhBound ? 18.0 : 20.0;
}

/// Architecture of the vector-field MLP: tanh after every hidden affine
/// layer, identity after the output affine layer, then the wrapper.
struct NetSpec {
  int input_dim = 2;
  std::vector<int> hidden_widths = {128, 128, 128};
  int output_dim = 2;
  Wrapper wrapper = Wrapper::Clamp;
  double wrapper_bound = 20.0;

  void validate() const {
    if (input_dim < 1 || output_dim < 1 || input_dim != output_dim)
      throw ContractViolation("net spec: input_dim must equal output_dim and be >= 1");
    if (hidden_widths.empty()) throw ContractViolation("net spec: need at least one hidden layer");
    for (int w : hidden_widths)
      if (w < 1) throw ContractViolation("net spec: hidden widths must be positive");
    if (!(wrapper_bound > 0.0)) throw ContractViolation("net spec: wrapper bound must be > 0");
  }

  int n_layers() const { return static_cast<int>(hidden_widths.size()) + 1; }

  int layer_in(int l) const {
    return l == 0 ? input_dim : hidden_widths[static_cast<std::size_t>(l - 1)];
  }
  int layer_out(int l) const {
    return l == n_layers() - 1 ? output_dim : hidden_widths[static_cast<std::size_t>(l)];
  }

  /// Offset of layer l's weight block; biases follow the weights.
  std::size_t layer_offset(int l) const {
    std::size_t off = 0;
    for (int i = 0; i < l; ++i)
      off += static_cast<std::size_t>(layer_in(i)) * layer_out(i) + layer_out(i);
    return off;
  }

  std::size_t param_count() const { return layer_offset(n_layers()); }

  /// Doubles needed per recorded forward pass: input, hidden activations, raw output.
  std::size_t record_size() const {
    std::size_t n = static_cast<std::size_t>(input_dim) + output_dim;
    for (int w : hidden_widths) n += static_cast<std::size_t>(w);
    return n;
  }

  bool operator==(const NetSpec&) const = default;
};

/// Flat parameter vector: per layer, row-major weights then biases, layers in
/// forward order.
using ParamVec = std::vector<double>;

/// Xavier-normal weights (std = sqrt(2/(fan_in+fan_out))), zero biases.
inline ParamVec init_xavier(const NetSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamVec p(spec.param_count(), 0.0);
  Rng rng = Rng::stream(seed, StreamPurpose::NetInit);
  for (int l = 0; l < spec.n_layers(); ++l) {
    const int fan_in = spec.layer_in(l), fan_out = spec.layer_out(l);
    const double std_dev = std::sqrt(2.0 / (fan_in + fan_out));
    double* w = p.data() + spec.layer_offset(l);
    for (int i = 0; i < fan_in * fan_out; ++i) w[i] = std_dev * rng.normal();
    // biases stay zero
  }
  return p;
}

inline double param_l1(const ParamVec& p) {
  double s = 0.0;
  for (double v : p) s += std::abs(v);
  return s;
}

namespace detail {
/// tanh via 1 - 2/(exp(2x)+1), which vectorizes through Eigen's packet exp
/// for doubles (the stock array tanh falls back to scalar libm calls).
/// Saturates correctly for large |x| and propagates NaN.
template <class Derived>
inline auto fast_tanh(const Eigen::ArrayBase<Derived>& x) {
  return 1.0 - 2.0 / ((2.0 * x).exp() + 1.0);
}
}  // namespace detail

inline double apply_wrapper_scalar(double r, Wrapper w, double bound) {
  switch (w) {
    case Wrapper::None: return r;
    case Wrapper::TanhBound: return bound * std::tanh(r / bound);
    case Wrapper::Squared: return r * std::abs(r);
    case Wrapper::Clamp: return std::clamp(r, -bound, bound);
  }
  return r;
}

/// Subgradient conventions: clamp is 1 on the closed interval [-B, B] and 0
/// outside; squared is 2|r| (0 at the origin).
inline double wrapper_derivative(double r, Wrapper w, double bound) {
  switch (w) {
    case Wrapper::None: return 1.0;
    case Wrapper::TanhBound: {
      const double th = std::tanh(r / bound);
      return 1.0 - th * th;
    }
    case Wrapper::Squared: return 2.0 * std::abs(r);
    case Wrapper::Clamp: return std::abs(r) <= bound ? 1.0 : 0.0;
  }
  return 1.0;
}

/// Elementwise wrapper application on a state-sized vector.
inline void apply_wrapper(const double* raw, double* out, int n, Wrapper w, double bound) {
  for (int i = 0; i < n; ++i) out[i] = apply_wrapper_scalar(raw[i], w, bound);
}

namespace detail {
using MatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                              Eigen::RowMajor>>;
using GradMatMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using VecMap = Eigen::Map<const Eigen::VectorXd>;
using MutVecMap = Eigen::Map<Eigen::VectorXd>;
}  // namespace detail

/// Deferred parameter-gradient accumulation for the MLP reverse pass.
/// Instead of a rank-1 weight update per evaluation (which is memory-bound),
/// input activations and layer deltas are buffered as columns and flushed as
/// one matrix product per layer.
class MlpGradQueue {
 public:
  void configure(const NetSpec& spec, int capacity = 1024) {
    const int L = spec.n_layers();
    xs_.resize(static_cast<std::size_t>(L));
    ls_.resize(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
      xs_[static_cast<std::size_t>(l)].resize(spec.layer_in(l), capacity);
      ls_[static_cast<std::size_t>(l)].resize(spec.layer_out(l), capacity);
    }
    offsets_.resize(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) offsets_[static_cast<std::size_t>(l)] = spec.layer_offset(l);
    capacity_ = capacity;
    count_ = 0;
  }

  bool configured_for(const NetSpec& spec) const {
    return !xs_.empty() && xs_.size() == static_cast<std::size_t>(spec.n_layers()) &&
           xs_[0].rows() == spec.layer_in(0) && ls_[0].rows() == spec.layer_out(0);
  }

  bool full() const { return count_ == capacity_; }
  int count() const { return count_; }

  /// Stage one evaluation's per-layer (input, delta) columns.
  void push_layer(int l, const double* a_in, const double* lam) {
    auto& X = xs_[static_cast<std::size_t>(l)];
    auto& L = ls_[static_cast<std::size_t>(l)];
    std::copy(a_in, a_in + X.rows(), X.col(count_).data());
    std::copy(lam, lam + L.rows(), L.col(count_).data());
  }

  void advance() { ++count_; }

  void flush(double* grad) {
    if (count_ == 0) return;
    for (std::size_t l = 0; l < xs_.size(); ++l) {
      const auto& X = xs_[l];
      const auto& L = ls_[l];
      double* gbase = grad + offsets_[l];
      detail::GradMatMap gW(gbase, L.rows(), X.rows());
      gW.noalias() += L.leftCols(count_) * X.leftCols(count_).transpose();
      detail::MutVecMap gb(gbase + static_cast<std::size_t>(L.rows()) * X.rows(), L.rows());
      gb.noalias() += L.leftCols(count_).rowwise().sum();
    }
    count_ = 0;
  }

 private:
  std::vector<Eigen::MatrixXd> xs_, ls_;
  std::vector<std::size_t> offsets_;
  int capacity_ = 0;
  int count_ = 0;
};

/// Forward and reverse passes over the MLP. The forward pass always writes
/// its intermediate activations into a caller-supplied record slot
/// ([input | hidden activations | raw output]) so that recording and
/// non-recording integrations share one arithmetic path; the reverse pass
/// replays a slot to accumulate parameter and input adjoints.
class Mlp {
 public:
  explicit Mlp(const NetSpec& spec) : spec_(spec) {
    spec_.validate();
    int maxw = spec_.input_dim;
    for (int w : spec_.hidden_widths) maxw = std::max(maxw, w);
    maxw = std::max(maxw, spec_.output_dim);
    lam_a_.resize(static_cast<std::size_t>(maxw));
    lam_b_.resize(static_cast<std::size_t>(maxw));
    scratch_.resize(spec_.record_size());
  }

  const NetSpec& spec() const { return spec_; }

  /// saturation_count accumulates how many raw output components the clamp
  /// wrapper actually cut (|raw| > bound); untouched for other wrappers.
  void forward_record(std::span<const double> params, const double* x, double* out,
                      double* rec, long* saturation_count = nullptr) const {
    const NetSpec& s = spec_;
    const int H = static_cast<int>(s.hidden_widths.size());
    double* in_slot = rec;
    for (int i = 0; i < s.input_dim; ++i) {
      if (!std::isfinite(x[i])) throw ContractViolation("net forward: non-finite input");
      in_slot[i] = x[i];
    }
    const double* prev = in_slot;
    double* cur = rec + s.input_dim;
    int prev_n = s.input_dim;
    for (int l = 0; l < H; ++l) {
      const int n = s.hidden_widths[static_cast<std::size_t>(l)];
      const double* base = params.data() + s.layer_offset(l);
      detail::MatMap W(base, n, prev_n);
      detail::VecMap b(base + static_cast<std::size_t>(n) * prev_n, n);
      detail::VecMap pv(prev, prev_n);
      detail::MutVecMap av(cur, n);
      av.noalias() = W * pv + b;
      av = detail::fast_tanh(av.array());
      prev = cur;
      cur += n;
      prev_n = n;
    }
    double* raw = cur;
    {
      const int l = H;
      const double* base = params.data() + s.layer_offset(l);
      detail::MatMap W(base, s.output_dim, prev_n);
      detail::VecMap b(base + static_cast<std::size_t>(s.output_dim) * prev_n, s.output_dim);
      detail::VecMap pv(prev, prev_n);
      detail::MutVecMap rv(raw, s.output_dim);
      rv.noalias() = W * pv + b;
    }
    if (saturation_count && s.wrapper == Wrapper::Clamp) {
      for (int i = 0; i < s.output_dim; ++i)
        if (std::abs(raw[i]) > s.wrapper_bound) ++*saturation_count;
    }
    apply_wrapper(raw, out, s.output_dim, s.wrapper, s.wrapper_bound);
  }

  /// Plain evaluation; internally records into a scratch slot.
  void forward(std::span<const double> params, const double* x, double* out,
               long* saturation_count = nullptr) const {
    forward_record(params, x, out, scratch_.data(), saturation_count);
  }

  /// Reverse pass for one recorded evaluation. Accumulates dL/dtheta into
  /// grad (same layout as ParamVec) and, when x_adj is non-null, dL/dx.
  /// With a queue, weight/bias contributions are buffered instead of applied
  /// immediately; the queue auto-flushes into grad when full.
  void vjp(std::span<const double> params, const double* rec, const double* out_adj,
           double* grad, double* x_adj = nullptr, MlpGradQueue* queue = nullptr) const {
    const NetSpec& s = spec_;
    const int H = static_cast<int>(s.hidden_widths.size());
    if (queue && queue->full()) queue->flush(grad);

    // activation offsets inside the record
    std::size_t raw_off = static_cast<std::size_t>(s.input_dim);
    for (int w : s.hidden_widths) raw_off += static_cast<std::size_t>(w);
    const double* raw = rec + raw_off;

    double* lam = lam_a_.data();
    double* lam_next = lam_b_.data();
    for (int i = 0; i < s.output_dim; ++i)
      lam[i] = out_adj[i] * wrapper_derivative(raw[i], s.wrapper, s.wrapper_bound);

    for (int l = H; l >= 0; --l) {
      const int n_out = s.layer_out(l), n_in = s.layer_in(l);
      std::size_t in_off = static_cast<std::size_t>(s.input_dim);
      for (int j = 0; j < l - 1; ++j)
        in_off += static_cast<std::size_t>(s.hidden_widths[static_cast<std::size_t>(j)]);
      const double* a_in = (l == 0) ? rec : rec + in_off;

      const double* base = params.data() + s.layer_offset(l);
      detail::MatMap W(base, n_out, n_in);
      detail::VecMap av(a_in, n_in);
      detail::VecMap lv(lam, n_out);

      if (queue) {
        queue->push_layer(l, a_in, lam);
      } else {
        double* gbase = grad + s.layer_offset(l);
        detail::GradMatMap gW(gbase, n_out, n_in);
        detail::MutVecMap gb(gbase + static_cast<std::size_t>(n_out) * n_in, n_out);
        gW.noalias() += lv * av.transpose();
        gb += lv;
      }

      if (l > 0 || x_adj) {
        detail::MutVecMap nv(lam_next, n_in);
        nv.noalias() = W.transpose() * lv;
        if (l > 0) {
          // through the tanh of the producing hidden layer
          for (int i = 0; i < n_in; ++i) nv[i] *= (1.0 - a_in[i] * a_in[i]);
        } else {
          for (int i = 0; i < n_in; ++i) x_adj[i] += nv[i];
          break;
        }
      }
      std::swap(lam, lam_next);
    }
    if (queue) queue->advance();
  }

 private:
  NetSpec spec_;
  mutable std::vector<double> lam_a_, lam_b_, scratch_;
};

/// Column-batched forward/reverse passes over the MLP: states are matrix
/// columns, affine layers become matrix products. Used where many
/// independent evaluations share one parameter vector (collocation sets).
class MlpBatch {
 public:
  explicit MlpBatch(const NetSpec& spec) : spec_(spec) {
    acts_.resize(spec_.hidden_widths.size());
  }

  const NetSpec& spec() const { return spec_; }

  /// X is in_dim x n; Y becomes out_dim x n of wrapped outputs.
  void forward(std::span<const double> params, const Eigen::MatrixXd& X,
               Eigen::MatrixXd& Y, long* saturation_count = nullptr) {
    const NetSpec& s = spec_;
    const auto n = X.cols();
    x_ = X;
    const Eigen::MatrixXd* prev = &x_;
    for (std::size_t l = 0; l < acts_.size(); ++l) {
      const int w = s.hidden_widths[l];
      const double* base = params.data() + s.layer_offset(static_cast<int>(l));
      detail::MatMap W(base, w, prev->rows());
      detail::VecMap b(base + static_cast<std::size_t>(w) * prev->rows(), w);
      acts_[l].resize(w, n);
      acts_[l].noalias() = W * (*prev);
      acts_[l].colwise() += b;
      acts_[l] = detail::fast_tanh(acts_[l].array());
      prev = &acts_[l];
    }
    {
      const int lout = s.n_layers() - 1;
      const double* base = params.data() + s.layer_offset(lout);
      detail::MatMap W(base, s.output_dim, prev->rows());
      detail::VecMap b(base + static_cast<std::size_t>(s.output_dim) * prev->rows(),
                       s.output_dim);
      raw_.resize(s.output_dim, n);
      raw_.noalias() = W * (*prev);
      raw_.colwise() += b;
    }
    if (saturation_count && s.wrapper == Wrapper::Clamp)
      *saturation_count += (raw_.array().abs() > s.wrapper_bound).count();
    Y.resize(s.output_dim, n);
    switch (s.wrapper) {
      case Wrapper::None:
        Y = raw_;
        break;
      case Wrapper::TanhBound:
        Y = s.wrapper_bound * detail::fast_tanh((raw_ / s.wrapper_bound).array());
        break;
      case Wrapper::Squared:
        Y = raw_.array() * raw_.array().abs();
        break;
      case Wrapper::Clamp:
        Y = raw_.array().min(s.wrapper_bound).max(-s.wrapper_bound);
        break;
    }
  }

  /// Parameter adjoints for the latest forward batch; out_adj is dL/dY.
  void vjp(std::span<const double> params, const Eigen::MatrixXd& out_adj, double* grad) {
    const NetSpec& s = spec_;
    lam_.resize(s.output_dim, out_adj.cols());
    switch (s.wrapper) {
      case Wrapper::None:
        lam_ = out_adj;
        break;
      case Wrapper::TanhBound:
        lam_ = out_adj.array() *
               (1.0 - detail::fast_tanh((raw_ / s.wrapper_bound).array()).square());
        break;
      case Wrapper::Squared:
        lam_ = out_adj.array() * 2.0 * raw_.array().abs();
        break;
      case Wrapper::Clamp:
        lam_ = (raw_.array().abs() <= s.wrapper_bound)
                   .select(out_adj.array(), Eigen::ArrayXXd::Zero(out_adj.rows(),
                                                                  out_adj.cols()));
        break;
    }
    for (int l = s.n_layers() - 1; l >= 0; --l) {
      const Eigen::MatrixXd& a_in =
          l == 0 ? x_ : acts_[static_cast<std::size_t>(l - 1)];
      const double* base = params.data() + s.layer_offset(l);
      detail::MatMap W(base, s.layer_out(l), s.layer_in(l));
      double* gbase = grad + s.layer_offset(l);
      detail::GradMatMap gW(gbase, s.layer_out(l), s.layer_in(l));
      detail::MutVecMap gb(gbase + static_cast<std::size_t>(s.layer_out(l)) * s.layer_in(l),
                           s.layer_out(l));
      gW.noalias() += lam_ * a_in.transpose();
      gb.noalias() += lam_.rowwise().sum();
      if (l > 0) {
        next_.resize(s.layer_in(l), lam_.cols());
        next_.noalias() = W.transpose() * lam_;
        lam_.swap(next_);
        lam_.array() *= (1.0 - a_in.array().square());
      }
    }
  }

 private:
  NetSpec spec_;
  Eigen::MatrixXd x_, raw_, lam_, next_;
  std::vector<Eigen::MatrixXd> acts_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: line-oriented text, spec header then one shortest
// round-trip decimal per parameter in ParamVec order.

struct Checkpoint {
  NetSpec spec;
  ParamVec params;
  std::uint64_t seed = 0;
  long epoch = 0;
  double val_mse = 0.0;
};

inline std::string checkpoint_to_string(const Checkpoint& ck) {
  std::ostringstream out;
  out << "spec_input_dim " << ck.spec.input_dim << "\n";
  out << "spec_hidden";
  for (int w : ck.spec.hidden_widths) out << ' ' << w;
  out << "\n";
  out << "spec_wrapper " << to_string(ck.spec.wrapper) << "\n";
  out << "seed " << ck.seed << "\n";
  out << "epoch " << ck.epoch << "\n";
  out << "val_mse " << fmt_double(ck.val_mse) << "\n";
  for (double v : ck.params) out << fmt_double(v) << "\n";
  return out.str();
}

inline Checkpoint checkpoint_from_string(const std::string& text) {
  Checkpoint ck;
  std::istringstream in(text);
  std::string line, key;
  std::vector<int> hidden;
  for (int i = 0; i < 6; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint: truncated header");
    std::istringstream ls(line);
    ls >> key;
    if (key == "spec_input_dim") {
      ls >> ck.spec.input_dim;
      ck.spec.output_dim = ck.spec.input_dim;
    } else if (key == "spec_hidden") {
      int w;
      while (ls >> w) hidden.push_back(w);
    } else if (key == "spec_wrapper") {
      std::string name;
      ls >> name;
      ck.spec.wrapper = wrapper_from_string(name);
      ck.spec.wrapper_bound = default_wrapper_bound(ck.spec.wrapper);
    } else if (key == "seed") {
      ls >> ck.seed;
    } else if (key == "epoch") {
      ls >> ck.epoch;
    } else if (key == "val_mse") {
      std::string v;
      ls >> v;
      ck.val_mse = parse_double(v);
    } else {
      throw std::runtime_error("checkpoint: unexpected header line '" + line + "'");
    }
  }
  ck.spec.hidden_widths = hidden;
  ck.spec.validate();
  ck.params.reserve(ck.spec.param_count());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ck.params.push_back(parse_double(line));
  }
  if (ck.params.size() != ck.spec.param_count())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_text_file(path, checkpoint_to_string(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_string(read_text_file(path));
}

}  // namespace odelearn
