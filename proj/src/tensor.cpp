#include "poolbert/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "poolbert/error.hpp"

namespace poolbert {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), real(0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  auto storage = std::make_shared<detail::TensorStorage>();
  storage->data.assign(shape_numel(shape), value);
  storage->shape = std::move(shape);
  storage->requires_grad = requires_grad;
  return Tensor(std::move(storage));
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto storage = std::make_shared<detail::TensorStorage>();
  storage->shape = std::move(shape);
  storage->data = std::move(values);
  storage->requires_grad = requires_grad;
  return Tensor(std::move(storage));
}

Tensor Tensor::scalar(real value, bool requires_grad) {
  return from(Shape{1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const real> Tensor::data() const {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->data;
}

std::span<real> Tensor::mutable_data() {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->data;
}

real Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
  return storage_->data[0];
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!storage_) throw ContractError("use of an undefined tensor");
  storage_->requires_grad = value;
}

bool Tensor::has_grad() const { return storage_ && !storage_->grad.empty(); }

std::span<const real> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return storage_->grad;
}

std::span<real> Tensor::mutable_grad() {
  if (!storage_) throw ContractError("use of an undefined tensor");
  if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), real(0.0));
  return storage_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(storage_->grad.begin(), storage_->grad.end(), real(0.0));
}

void Tensor::clear_grad() {
  if (storage_) {
    storage_->grad.clear();
    storage_->grad.shrink_to_fit();
  }
}

Tensor Tensor::clone() const {
  return from(shape(), std::vector<real>(data().begin(), data().end()), false);
}

// ---------------------------------------------------------------------------

namespace {
thread_local Tape* current_tape = nullptr;
std::atomic<bool> checked_flag{false};
}  // namespace

void Tape::record(std::function<void()> backward_fn) {
  if (consumed_) throw ContractError("recording onto a tape that was already backpropagated");
  entries_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  if (consumed_) throw ContractError("tape was already backpropagated; record a new tape");
  consumed_ = true;
  Tensor seed = loss;
  seed.mutable_grad()[0] += real(1.0);
  NoTapeScope no_record;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

void Tape::clear() {
  entries_.clear();
  entries_.shrink_to_fit();
  consumed_ = false;
}

Tape* active_tape() { return current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoTapeScope::NoTapeScope() : previous_(current_tape) { current_tape = nullptr; }
NoTapeScope::~NoTapeScope() { current_tape = previous_; }

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

bool checked_mode() { return checked_flag.load(std::memory_order_relaxed); }
void set_checked_mode(bool enabled) { checked_flag.store(enabled, std::memory_order_relaxed); }

CheckedModeScope::CheckedModeScope(bool enabled) : previous_(checked_mode()) {
  set_checked_mode(enabled);
}
CheckedModeScope::~CheckedModeScope() { set_checked_mode(previous_); }

void check_finite(std::span<const real> values, const char* where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("non-finite value at index ") + std::to_string(i) + " in " +
                         where);
    }
  }
}

}  // namespace poolbert
