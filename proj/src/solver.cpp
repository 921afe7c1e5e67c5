#include "lidarsfm/solver.hpp"

#include <Eigen/Cholesky>
#include <cassert>
#include <cmath>
#include <cstdio>

#include "lidarsfm/errors.hpp"

namespace lidarsfm {

namespace {

double huber_rho(double s, double delta) {
  if (!std::isfinite(delta)) return s;
  const double d2 = delta * delta;
  return s <= d2 ? s : 2.0 * delta * std::sqrt(s) - d2;
}

double huber_rho_prime(double s, double delta) {
  if (!std::isfinite(delta)) return 1.0;
  const double d2 = delta * delta;
  return s <= d2 ? 1.0 : delta / std::sqrt(s);
}

double clamp_diag(double d) { return std::clamp(d, 1e-8, 1e32); }

}  // namespace

std::string SolverSummary::message() const {
  switch (termination) {
    case TerminationReason::kConverged:
      return "converged (relative cost change below tolerance)";
    case TerminationReason::kGradientTooSmall:
      return "converged (gradient below tolerance)";
    case TerminationReason::kMaxIterations:
      return "max iterations reached";
    case TerminationReason::kSingular:
      return "normal equations singular after damping escalation";
  }
  return "unknown";
}

int Problem::add_pose_block(RigidTransform* pose) {
  Block b;
  b.pose = pose;
  b.dimension = 6;
  blocks_.push_back(b);
  return static_cast<int>(blocks_.size()) - 1;
}

int Problem::add_euclidean_block(double* values, int dimension) {
  Block b;
  b.values = values;
  b.dimension = dimension;
  blocks_.push_back(b);
  return static_cast<int>(blocks_.size()) - 1;
}

void Problem::set_constant(int block_id) { blocks_.at(block_id).constant = true; }

void Problem::set_eliminable(int block_id) {
  assert(blocks_.at(block_id).pose == nullptr);
  blocks_.at(block_id).eliminable = true;
}

void Problem::add_residual(std::unique_ptr<ResidualBlock> residual, std::vector<int> block_ids,
                           double weight, double huber_delta) {
  Term t;
  t.residual = std::move(residual);
  t.blocks = std::move(block_ids);
  t.weight = weight;
  t.huber_delta = huber_delta;
  residuals_.push_back(std::move(t));
}

double Problem::cost() const {
  double total = 0.0;
  Eigen::VectorXd r;
  std::vector<Eigen::MatrixXd*> no_jacobians;
  for (const auto& term : residuals_) {
    r.resize(term.residual->dimension());
    no_jacobians.assign(term.blocks.size(), nullptr);
    term.residual->evaluate(r, no_jacobians);
    total += term.weight * huber_rho(r.squaredNorm(), term.huber_delta);
  }
  return total;
}

// Normal-equation state for one linearization point. Eliminable blocks are
// kept in block-diagonal form for Schur elimination; everything else lands
// in one dense reduced system.
class Solver {
 public:
  Solver(Problem& problem, const SolverOptions& options) : p_(problem), opts_(options) {
    offsets_.assign(p_.blocks_.size(), -1);
    elim_index_.assign(p_.blocks_.size(), -1);

    int total_active = 0;
    bool any_eliminable = false;
    for (const auto& b : p_.blocks_) {
      if (!b.constant) {
        total_active += b.dimension;
        any_eliminable |= b.eliminable;
      }
    }
    use_schur_ = any_eliminable && total_active > opts_.dense_parameter_limit;

    for (size_t i = 0; i < p_.blocks_.size(); ++i) {
      const auto& b = p_.blocks_[i];
      if (b.constant) continue;
      if (use_schur_ && b.eliminable) {
        elim_index_[i] = static_cast<int>(elim_blocks_.size());
        elim_blocks_.push_back(static_cast<int>(i));
      } else {
        offsets_[i] = reduced_dim_;
        reduced_dim_ += b.dimension;
      }
    }
  }

  SolverSummary run() {
    SolverSummary summary;
    summary.used_schur = use_schur_;
    double cost = p_.cost();
    summary.initial_cost = cost;
    summary.cost_trace.push_back(cost);
    if (reduced_dim_ == 0 && elim_blocks_.empty()) {
      summary.termination = TerminationReason::kConverged;
      summary.final_cost = cost;
      return summary;
    }

    double mu = opts_.initial_damping;
    double nu = 2.0;
    linearize();
    double grad_norm = gradient_inf_norm();
    if (grad_norm <= opts_.gradient_tolerance) {
      summary.termination = TerminationReason::kGradientTooSmall;
      summary.final_cost = cost;
      summary.final_gradient_norm = grad_norm;
      return summary;
    }

    while (summary.iterations < opts_.max_iterations) {
      bool accepted = false;
      int escalations = 0;
      double new_cost = cost;
      while (!accepted) {
        Eigen::VectorXd step_reduced;
        std::vector<Eigen::VectorXd> step_elim;
        double dot_g_step = 0.0, dot_step_damp = 0.0;
        if (!solve_damped(mu, step_reduced, step_elim, dot_g_step, dot_step_damp)) {
          mu *= nu;
          nu *= 2.0;
          if (++escalations > 40) {
            summary.termination = TerminationReason::kSingular;
            summary.final_cost = cost;
            summary.final_gradient_norm = grad_norm;
            return summary;
          }
          continue;
        }
        const double predicted = -dot_g_step + mu * dot_step_damp;
        const auto backup = save_state();
        apply_step(step_reduced, step_elim);
        new_cost = p_.cost();
        const double actual = cost - new_cost;
        if (!(new_cost < cost) || !std::isfinite(new_cost)) {
          restore_state(backup);
          mu *= nu;
          nu *= 2.0;
          if (++escalations > 40) {
            summary.termination = TerminationReason::kSingular;
            summary.final_cost = cost;
            summary.final_gradient_norm = grad_norm;
            return summary;
          }
          continue;
        }
        const double gain = predicted > 0.0 ? actual / predicted : 1.0;
        // When the quadratic model is essentially exact, finish the step
        // with an undamped Gauss-Newton solve.
        if (gain > 0.99999) {
          restore_state(backup);
          Eigen::VectorXd gn_reduced;
          std::vector<Eigen::VectorXd> gn_elim;
          double gs = 0.0, sd = 0.0;
          if (solve_damped(0.0, gn_reduced, gn_elim, gs, sd)) {
            apply_step(gn_reduced, gn_elim);
            const double gn_cost = p_.cost();
            if (gn_cost < new_cost && std::isfinite(gn_cost)) {
              new_cost = gn_cost;
            } else {
              restore_state(backup);
              apply_step(step_reduced, step_elim);
            }
          } else {
            apply_step(step_reduced, step_elim);
          }
        }
        mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * gain - 1.0, 3.0));
        nu = 2.0;
        accepted = true;
      }

      ++summary.iterations;
      summary.cost_trace.push_back(new_cost);
      const double rel_change = (cost - new_cost) / std::max(cost, 1e-300);
      cost = new_cost;
      if (opts_.verbose) {
        std::fprintf(stderr, "  iter %d cost %.6e rel %.3e mu %.3e\n", summary.iterations, cost,
                     rel_change, mu);
      }
      if (rel_change < opts_.function_tolerance) {
        summary.termination = TerminationReason::kConverged;
        summary.final_cost = cost;
        summary.final_gradient_norm = grad_norm;
        return summary;
      }
      linearize();
      grad_norm = gradient_inf_norm();
      if (grad_norm <= opts_.gradient_tolerance) {
        summary.termination = TerminationReason::kGradientTooSmall;
        summary.final_cost = cost;
        summary.final_gradient_norm = grad_norm;
        return summary;
      }
    }
    summary.termination = TerminationReason::kMaxIterations;
    summary.final_cost = cost;
    summary.final_gradient_norm = grad_norm;
    return summary;
  }

 private:
  struct ElimEntry {
    int reduced_block;                 // block index into p_.blocks_
    Eigen::MatrixXd cross;             // J_reduced^T J_elim
  };

  void linearize() {
    b_.setZero(reduced_dim_, reduced_dim_);
    g_reduced_.setZero(reduced_dim_);
    c_.assign(elim_blocks_.size(), Eigen::MatrixXd());
    g_elim_.assign(elim_blocks_.size(), Eigen::VectorXd());
    e_.assign(elim_blocks_.size(), {});
    for (size_t m = 0; m < elim_blocks_.size(); ++m) {
      const int dim = p_.blocks_[elim_blocks_[m]].dimension;
      c_[m].setZero(dim, dim);
      g_elim_[m].setZero(dim);
    }

    Eigen::VectorXd r;
    std::vector<Eigen::MatrixXd> jac_storage;
    std::vector<Eigen::MatrixXd*> jacobians;
    for (const auto& term : residuals()) {
      const int dim = term.residual->dimension();
      r.resize(dim);
      jac_storage.resize(term.blocks.size());
      jacobians.assign(term.blocks.size(), nullptr);
      for (size_t k = 0; k < term.blocks.size(); ++k) {
        const auto& blk = p_.blocks_[term.blocks[k]];
        if (blk.constant) continue;
        jac_storage[k].resize(dim, blk.dimension);
        jacobians[k] = &jac_storage[k];
      }
      term.residual->evaluate(r, jacobians);
      const double w = term.weight * huber_rho_prime(r.squaredNorm(), term.huber_delta);
      if (w == 0.0) continue;

      for (size_t k = 0; k < term.blocks.size(); ++k) {
        if (jacobians[k] == nullptr) continue;
        const int bk = term.blocks[k];
        const Eigen::MatrixXd& jk = jac_storage[k];
        if (elim_index_[bk] >= 0) {
          const int m = elim_index_[bk];
          c_[m].noalias() += w * jk.transpose() * jk;
          g_elim_[m].noalias() += w * jk.transpose() * r;
          continue;
        }
        g_reduced_.segment(offsets_[bk], jk.cols()).noalias() += w * jk.transpose() * r;
        for (size_t l = 0; l < term.blocks.size(); ++l) {
          if (jacobians[l] == nullptr) continue;
          const int bl = term.blocks[l];
          const Eigen::MatrixXd& jl = jac_storage[l];
          if (elim_index_[bl] >= 0) {
            cross_entry(elim_index_[bl], bk).noalias() += w * jk.transpose() * jl;
          } else {
            b_.block(offsets_[bk], offsets_[bl], jk.cols(), jl.cols()).noalias() +=
                w * jk.transpose() * jl;
          }
        }
      }
    }
  }

  Eigen::MatrixXd& cross_entry(int m, int reduced_block) {
    for (auto& entry : e_[m]) {
      if (entry.reduced_block == reduced_block) return entry.cross;
    }
    const int rows = p_.blocks_[reduced_block].dimension;
    const int cols = p_.blocks_[elim_blocks_[m]].dimension;
    e_[m].push_back({reduced_block, Eigen::MatrixXd::Zero(rows, cols)});
    return e_[m].back().cross;
  }

  double gradient_inf_norm() const {
    double norm = reduced_dim_ > 0 ? g_reduced_.cwiseAbs().maxCoeff() : 0.0;
    for (const auto& g : g_elim_) {
      if (g.size() > 0) norm = std::max(norm, g.cwiseAbs().maxCoeff());
    }
    return norm;
  }

  // Solves (H + mu * diag(H)) step = -g, eliminating the marked blocks.
  // Returns g . step and step . diag_damping . step for the gain-ratio model.
  bool solve_damped(double mu, Eigen::VectorXd& step_reduced,
                    std::vector<Eigen::VectorXd>& step_elim, double& dot_g_step,
                    double& dot_step_damp) {
    Eigen::MatrixXd s = b_;
    Eigen::VectorXd damp_reduced(reduced_dim_);
    for (int i = 0; i < reduced_dim_; ++i) {
      damp_reduced(i) = clamp_diag(b_(i, i));
      s(i, i) += mu * damp_reduced(i);
    }
    Eigen::VectorXd rhs = -g_reduced_;

    std::vector<Eigen::MatrixXd> c_inv(elim_blocks_.size());
    std::vector<Eigen::VectorXd> damp_elim(elim_blocks_.size());
    for (size_t m = 0; m < elim_blocks_.size(); ++m) {
      Eigen::MatrixXd cd = c_[m];
      damp_elim[m].resize(cd.rows());
      for (int i = 0; i < cd.rows(); ++i) {
        damp_elim[m](i) = clamp_diag(cd(i, i));
        cd(i, i) += mu * damp_elim[m](i);
      }
      Eigen::LDLT<Eigen::MatrixXd> ldlt(cd);
      if (ldlt.info() != Eigen::Success) return false;
      c_inv[m] = ldlt.solve(Eigen::MatrixXd::Identity(cd.rows(), cd.cols()));
      if (!c_inv[m].allFinite()) return false;
      const Eigen::VectorXd cg = c_inv[m] * g_elim_[m];
      for (const auto& ea : e_[m]) {
        rhs.segment(offsets_[ea.reduced_block], ea.cross.rows()).noalias() += ea.cross * cg;
        const Eigen::MatrixXd ea_cinv = ea.cross * c_inv[m];
        for (const auto& eb : e_[m]) {
          s.block(offsets_[ea.reduced_block], offsets_[eb.reduced_block], ea.cross.rows(),
                  eb.cross.rows())
              .noalias() -= ea_cinv * eb.cross.transpose();
        }
      }
    }

    step_reduced.resize(reduced_dim_);
    if (reduced_dim_ > 0) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
      if (ldlt.info() != Eigen::Success) return false;
      step_reduced = ldlt.solve(rhs);
      if (!step_reduced.allFinite()) return false;
    }

    dot_g_step = reduced_dim_ > 0 ? g_reduced_.dot(step_reduced) : 0.0;
    dot_step_damp =
        reduced_dim_ > 0 ? step_reduced.cwiseProduct(damp_reduced).dot(step_reduced) : 0.0;

    step_elim.assign(elim_blocks_.size(), Eigen::VectorXd());
    for (size_t m = 0; m < elim_blocks_.size(); ++m) {
      Eigen::VectorXd et_step = g_elim_[m];
      for (const auto& ea : e_[m]) {
        et_step.noalias() +=
            ea.cross.transpose() * step_reduced.segment(offsets_[ea.reduced_block], ea.cross.rows());
      }
      step_elim[m] = -c_inv[m] * et_step;
      dot_g_step += g_elim_[m].dot(step_elim[m]);
      dot_step_damp += step_elim[m].cwiseProduct(damp_elim[m]).dot(step_elim[m]);
    }
    return true;
  }

  struct StateBackup {
    std::vector<RigidTransform> poses;
    std::vector<std::vector<double>> values;
  };

  StateBackup save_state() const {
    StateBackup s;
    for (const auto& b : p_.blocks_) {
      if (b.pose != nullptr) {
        s.poses.push_back(*b.pose);
      } else {
        s.values.emplace_back(b.values, b.values + b.dimension);
      }
    }
    return s;
  }

  void restore_state(const StateBackup& s) {
    size_t ip = 0, iv = 0;
    for (auto& b : p_.blocks_) {
      if (b.pose != nullptr) {
        *b.pose = s.poses[ip++];
      } else {
        std::copy(s.values[iv].begin(), s.values[iv].end(), b.values);
        ++iv;
      }
    }
  }

  void apply_step(const Eigen::VectorXd& step_reduced,
                  const std::vector<Eigen::VectorXd>& step_elim) {
    for (size_t i = 0; i < p_.blocks_.size(); ++i) {
      auto& b = p_.blocks_[i];
      const int m = elim_index_[i];
      const int off = offsets_[i];
      if (b.constant || (m < 0 && off < 0)) continue;
      if (b.pose != nullptr) {
        const Vec6 delta = step_reduced.segment<6>(off);
        *b.pose = (*b.pose) * se3_exp(Twist::FromVector(delta));
      } else {
        const Eigen::VectorXd& src =
            m >= 0 ? step_elim[m]
                   : static_cast<const Eigen::VectorXd&>(step_reduced.segment(off, b.dimension));
        for (int d = 0; d < b.dimension; ++d) b.values[d] += m >= 0 ? src(d) : src(d);
      }
    }
  }

  const std::vector<Problem::Term>& residuals() const { return p_.residuals_; }

  Problem& p_;
  SolverOptions opts_;
  bool use_schur_ = false;
  int reduced_dim_ = 0;
  std::vector<int> offsets_;     // per block, offset in reduced vector or -1
  std::vector<int> elim_index_;  // per block, index into elim arrays or -1
  std::vector<int> elim_blocks_;

  Eigen::MatrixXd b_;
  Eigen::VectorXd g_reduced_;
  std::vector<Eigen::MatrixXd> c_;
  std::vector<Eigen::VectorXd> g_elim_;
  std::vector<std::vector<ElimEntry>> e_;
};

SolverSummary Problem::solve(const SolverOptions& options) {
  Solver solver(*this, options);
  return solver.run();
}

}  // namespace lidarsfm
