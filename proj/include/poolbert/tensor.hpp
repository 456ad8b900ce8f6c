#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "poolbert/real.hpp"

namespace poolbert {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct TensorStorage {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major float32 tensor with an optional gradient buffer.
//
// Tensor is a handle: copies share storage. Values written by an op are not
// modified afterwards; only parameters are updated in place (by the
// optimizer, through mutable_data()).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const real> data() const;
  std::span<real> mutable_data();
  real item() const;
  real at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const real> grad() const;
  /// Allocates a zero gradient buffer on first use.
  std::span<real> mutable_grad();
  void zero_grad();
  void clear_grad();

  /// A new tensor with a deep copy of the values and no gradient.
  Tensor clone() const;

  const void* identity() const { return storage_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorStorage> storage) : storage_(std::move(storage)) {}

  std::shared_ptr<detail::TensorStorage> storage_;
};

// Ordered record of differentiable operations executed while it is active.
//
// Ops record a backward closure when a tape is active on the current thread
// and at least one input requires a gradient. Entries are appended in
// execution order, which is already a topological order. backward() replays
// them once in reverse; a tape can be backpropagated only once, a second
// call throws ContractError.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn);
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  /// requires_grad tensor reachable from loss. Gradients add to whatever is
  /// already stored, so parameters used twice receive the sum.
  void backward(const Tensor& loss);

  /// Drops recorded closures (and the activations they keep alive).
  void clear();

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

/// Tape that ops on this thread currently record into, or nullptr.
Tape* active_tape();

// RAII activation of a tape for the current thread. Nests.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording for the current thread (e.g. for numeric probes).
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Free-function form of Tape::backward.
void backward(const Tensor& loss, Tape& tape);

// Checked mode: every op output (and every gradient produced in backward) is
// scanned for NaN/Inf, raising NumericError. Off by default.
bool checked_mode();
void set_checked_mode(bool enabled);

class CheckedModeScope {
 public:
  explicit CheckedModeScope(bool enabled = true);
  ~CheckedModeScope();

 private:
  bool previous_;
};

void check_finite(std::span<const real> values, const char* where);

}  // namespace poolbert
