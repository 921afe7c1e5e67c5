#pragma once

#include <Eigen/Core>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "lidarsfm/geometry.hpp"

namespace lidarsfm {

// One residual term. Implementations hold pointers to the parameter objects
// they read and produce tangent-space Jacobians on demand (rot-first twist
// for SE(3) blocks).
class ResidualBlock {
 public:
  virtual ~ResidualBlock() = default;
  virtual int dimension() const = 0;
  // jacobians has one slot per attached parameter block; null entries are
  // not needed by the caller.
  virtual void evaluate(Eigen::VectorXd& residual,
                        const std::vector<Eigen::MatrixXd*>& jacobians) const = 0;
};

struct SolverOptions {
  int max_iterations = 100;
  double function_tolerance = 1e-12;   // relative cost change
  double gradient_tolerance = 1e-14;   // inf-norm of the gradient
  double initial_damping = 1e-4;
  int dense_parameter_limit = 3000;    // above this, eliminable blocks go through Schur
  bool verbose = false;
};

enum class TerminationReason { kConverged, kGradientTooSmall, kMaxIterations, kSingular };

struct SolverSummary {
  TerminationReason termination = TerminationReason::kMaxIterations;
  std::vector<double> cost_trace;  // initial cost followed by each accepted cost
  double initial_cost = 0.0;
  double final_cost = 0.0;
  double final_gradient_norm = 0.0;
  int iterations = 0;  // accepted steps
  bool used_schur = false;

  bool converged() const {
    return termination == TerminationReason::kConverged ||
           termination == TerminationReason::kGradientTooSmall;
  }
  std::string message() const;
};

// Damped Gauss-Newton least squares over SE(3) and Euclidean blocks, with
// optional Huber robustification per residual. Accepted steps strictly
// decrease the robustified cost. Evaluation and assembly run in a fixed
// order, so results are bit-stable for a given input.
class Problem {
 public:
  // Pose block updated as T <- T * exp(delta).
  int add_pose_block(RigidTransform* pose);
  // Plain Euclidean block of the given dimension.
  int add_euclidean_block(double* values, int dimension);
  int add_point_block(Vec3* point) { return add_euclidean_block(point->data(), 3); }

  void set_constant(int block_id);
  // Marks a (Euclidean) block for Schur elimination on large problems. A
  // residual may touch at most one eliminable block.
  void set_eliminable(int block_id);

  // weight scales the squared cost of the term; huber_delta = inf means a
  // plain squared loss.
  void add_residual(std::unique_ptr<ResidualBlock> residual, std::vector<int> block_ids,
                    double weight = 1.0,
                    double huber_delta = std::numeric_limits<double>::infinity());

  int num_blocks() const { return static_cast<int>(blocks_.size()); }
  int num_residuals() const { return static_cast<int>(residuals_.size()); }

  // Robustified total cost at the current parameter values.
  double cost() const;

  SolverSummary solve(const SolverOptions& options = {});

 private:
  friend class Solver;

  struct Block {
    RigidTransform* pose = nullptr;  // exactly one of pose/values is set
    double* values = nullptr;
    int dimension = 0;  // tangent dimension (6 for poses)
    bool constant = false;
    bool eliminable = false;
  };

  struct Term {
    std::unique_ptr<ResidualBlock> residual;
    std::vector<int> blocks;
    double weight = 1.0;
    double huber_delta = std::numeric_limits<double>::infinity();
  };

  std::vector<Block> blocks_;
  std::vector<Term> residuals_;
};

}  // namespace lidarsfm
