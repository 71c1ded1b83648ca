#include "dnas/curvature.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <memory>

#include "dnas/errors.hpp"
#include "dnas/ops.hpp"
#include "dnas/rng.hpp"

namespace dnas {
namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> random_unit(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  double nv = 0.0;
  while (nv == 0.0) {
    for (auto& x : v) x = rng.normal();
    nv = norm(v);
  }
  for (auto& x : v) x /= nv;
  return v;
}

Eigen::MatrixXd orthonormal(const Eigen::MatrixXd& m) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  return qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), m.cols());
}

}  // namespace

std::vector<double> hvp(const GradientFn& grad, std::span<const double> theta, std::span<const double> v,
                        double eps) {
  if (v.size() != theta.size()) {
    throw ShapeError("hvp: direction has " + std::to_string(v.size()) + " entries, point has " +
                     std::to_string(theta.size()));
  }
  const double nv = norm(v);
  if (!(nv > 0.0)) throw DomainError("hvp: direction must be nonzero");
  std::vector<double> plus(theta.begin(), theta.end()), minus(theta.begin(), theta.end());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    plus[i] += eps * v[i] / nv;
    minus[i] -= eps * v[i] / nv;
  }
  const auto gp = grad(plus);
  const auto gm = grad(minus);
  std::vector<double> out(theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (gp[i] - gm[i]) / (2.0 * eps) * nv;
    if (!std::isfinite(out[i])) throw DivergenceError("hvp: non-finite gradient", 0);
  }
  return out;
}

EigenResult dominant_eigenvalue(const GradientFn& grad, std::span<const double> theta, std::uint64_t seed,
                                const PowerIterationConfig& config) {
  EigenResult r;
  const auto n = static_cast<Eigen::Index>(theta.size());
  if (n == 0) {
    r.zero_curvature = true;
    return r;
  }
  if (config.block < 1) throw ConfigError("curvature.block: must be >= 1");
  const Eigen::Index p = std::min<Eigen::Index>(config.block, n);
  Rng rng(derive_seed(seed, {tag_of("power")}));
  auto random_basis = [&] {
    Eigen::MatrixXd m(n, p);
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto u = random_unit(static_cast<std::size_t>(n), rng);
      for (Eigen::Index i = 0; i < n; ++i) m(i, j) = u[static_cast<std::size_t>(i)];
    }
    return orthonormal(m);
  };
  Eigen::MatrixXd v = random_basis();
  Eigen::MatrixXd w(n, p);
  int zero_streak = 0;
  double prev = 0.0;
  bool have_prev = false;
  for (int it = 1; it <= config.max_iters; ++it) {
    r.iterations = it;
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto col = hvp(grad, theta, std::span<const double>(v.col(j).data(), static_cast<std::size_t>(n)),
                           config.eps);
      w.col(j) = Eigen::Map<const Eigen::VectorXd>(col.data(), n);
    }
    if (w.isZero(0.0)) {
      if (++zero_streak >= 3) {
        r.lambda = 0.0;
        r.zero_curvature = true;
        return r;
      }
      v = random_basis();
      continue;
    }
    zero_streak = 0;
    Eigen::MatrixXd t = v.transpose() * w;
    t = 0.5 * (t + t.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ritz(t);
    Eigen::Index top = 0;
    ritz.eigenvalues().cwiseAbs().maxCoeff(&top);
    const double lambda = ritz.eigenvalues()(top);
    v = orthonormal(w * ritz.eigenvectors());
    r.lambda = lambda;
    if (have_prev && std::abs(lambda - prev) / std::max(std::abs(lambda), 1e-12) < config.tol) break;
    prev = lambda;
    have_prev = true;
  }
  return r;
}

ValidationLandscape::ValidationLandscape(Supernet& net, std::vector<Batch> batches, ArchGroup group)
    : net_(net), batches_(std::move(batches)), group_(group) {
  if (batches_.empty()) throw ConfigError("curvature: no held-out batches");
}

std::vector<double> ValidationLandscape::point() const { return net_.arch().flatten(alpha(), beta()); }

std::vector<double> ValidationLandscape::gradient(std::span<const double> theta) {
  ArchParams& arch = net_.arch();
  const std::vector<double> saved = arch.flatten();
  arch.assign(theta, alpha(), beta());
  arch.zero_grad();
  for (const Batch& b : batches_) {
    Tape tape;
    ForwardOptions fo;
    fo.training = false;
    fo.track_weights = false;
    fo.track_arch = true;
    Var loss = ops::cross_entropy(net_.forward(tape, b.images, fo), b.labels);
    tape.backward(ops::scale(loss, 1.0 / static_cast<double>(batches_.size())));
  }
  std::vector<double> g = arch.flatten_grad(alpha(), beta());
  arch.zero_grad();
  arch.assign(saved);
  return g;
}

double ValidationLandscape::loss(std::span<const double> theta) {
  ArchParams& arch = net_.arch();
  const std::vector<double> saved = arch.flatten();
  arch.assign(theta, alpha(), beta());
  double total = 0.0;
  for (const Batch& b : batches_) {
    ForwardOptions fo;
    fo.training = false;
    fo.track_weights = false;
    fo.track_arch = false;
    total += cross_entropy_loss(net_, b, fo);
  }
  arch.assign(saved);
  return total / static_cast<double>(batches_.size());
}

GradientFn ValidationLandscape::as_function() {
  return [this](std::span<const double> theta) { return gradient(theta); };
}

std::vector<Batch> held_out_batches(const DataPools& data, int batches, int batch_size) {
  std::vector<Batch> out;
  std::size_t pos = 0;
  for (int b = 0; b < batches; ++b) {
    std::vector<const SegSample*> picked;
    for (int i = 0; i < batch_size && pos < data.validation.size(); ++i) picked.push_back(&data.validation[pos++]);
    if (picked.empty()) break;
    out.push_back(make_batch(picked));
  }
  if (out.empty()) throw ConfigError("curvature: validation pool is empty");
  return out;
}

std::function<void(int, Supernet&, MetricsRow&)> make_trace_hook(EigenTrace& trace, const DataPools& data,
                                                                 const TraceConfig& config, std::uint64_t seed) {
  if (config.every_n_epochs < 1) throw ConfigError("curvature.every_n_epochs: must be >= 1");
  trace.hvp_epsilon = config.power.eps;
  auto batches = std::make_shared<std::vector<Batch>>(held_out_batches(data, config.batches, config.batch_size));
  return [&trace, batches, config, seed](int epoch, Supernet& net, MetricsRow& row) {
    if ((epoch + 1) % config.every_n_epochs != 0) return;
    ValidationLandscape land(net, *batches, config.group);
    const auto theta = land.point();
    const EigenResult r = dominant_eigenvalue(land.as_function(), theta,
                                              derive_seed(seed, {static_cast<std::uint64_t>(epoch)}), config.power);
    trace.epochs.push_back(epoch);
    trace.lambda_max.push_back(r.lambda);
    trace.iterations.push_back(r.iterations);
    row.lambda_max = r.lambda;
  };
}

void write_eigen_csv(std::ostream& os, const EigenTrace& trace) {
  os << "epoch,lambda_max,iterations,epsilon\n" << std::setprecision(17);
  for (std::size_t i = 0; i < trace.epochs.size(); ++i) {
    os << trace.epochs[i] << ',' << trace.lambda_max[i] << ',' << trace.iterations[i] << ',' << trace.hvp_epsilon
       << '\n';
  }
}

}  // namespace dnas
