#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mambacsr/errors.hpp"

namespace mambacsr {

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr Dtype value = Dtype::F32;
};
template <>
struct dtype_of<double> {
  static constexpr Dtype value = Dtype::F64;
};

template <typename T>
class Tape;

namespace detail {
template <typename T>
struct TensorAccess;
}

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);

/// Dense row-major tensor. Data is immutable after creation; recorded ops
/// produce new tensors. A tensor may carry a link (tape, value id) into the
/// differentiation tape that recorded it.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int64_t> shape, std::vector<T> data);

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, T value);
  static Tensor scalar(T value);

  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const;
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }
  Dtype dtype() const { return dtype_of<T>::value; }

  std::span<const T> values() const;
  const T* data() const { return data_ ? data_->data() : nullptr; }
  T item() const;
  T at(std::initializer_list<int64_t> idx) const;

  bool on_tape() const { return vid_ >= 0; }
  Tape<T>* tape() const { return tape_; }
  int64_t vid() const { return vid_; }
  /// Same storage, no tape link.
  Tensor detached() const;

 private:
  friend class Tape<T>;
  friend struct detail::TensorAccess<T>;

  std::shared_ptr<const std::vector<T>> data_;
  std::vector<int64_t> shape_;
  Tape<T>* tape_ = nullptr;
  int64_t vid_ = -1;
  // distinguishes a live tape from a destroyed one reallocated at the same
  // address
  uint64_t tape_uid_ = 0;
};

/// Reverse-mode tape. Ops append one record each; backward replays the
/// records in strict reverse order of creation, accumulating gradients per
/// value id. Gradient buffers are allocated lazily so values unreachable
/// from the loss cost nothing.
template <typename T>
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  uint64_t uid() const { return uid_; }

  /// Register a leaf value (parameter or input); returns the same tensor
  /// annotated with a value id on this tape.
  Tensor<T> watch(const Tensor<T>& t);

  /// Seed d(loss)/d(loss)=1 and replay all records in reverse. loss must be
  /// a 1-element tensor recorded on this tape. Calling backward twice
  /// without reset() is an error.
  void backward(const Tensor<T>& loss);

  /// Gradient of a watched/recorded tensor, zeros if the loss did not reach
  /// it. Throws TapeError for tensors that are not on this tape.
  Tensor<T> grad(const Tensor<T>& t) const;

  void reset();
  bool backward_run() const { return ran_; }
  size_t num_records() const { return records_.size(); }

  // --- op-implementation surface ---
  int64_t alloc_value(std::vector<int64_t> shape);
  /// Empty span when no gradient ever flowed into vid.
  std::span<const T> grad_view(int64_t vid) const;
  /// Accumulation buffer, allocated with zeros on first use.
  std::vector<T>& grad_accum(int64_t vid);
  void record(std::function<void(Tape&)> fn);

 private:
  struct ValueInfo {
    std::vector<int64_t> shape;
    std::vector<T> grad;  // empty until touched
  };
  uint64_t uid_;
  std::vector<ValueInfo> values_;
  std::vector<std::function<void(Tape&)>> records_;
  bool ran_ = false;
};

/// Named model parameter.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

namespace detail {

/// Internal constructor/accessor surface for op implementations.
template <typename T>
struct TensorAccess {
  static Tensor<T> make(std::vector<int64_t> shape, std::vector<T> data,
                        Tape<T>* tape) {
    Tensor<T> t(std::move(shape), std::move(data));
    if (tape != nullptr) {
      t.tape_ = tape;
      t.vid_ = tape->alloc_value(t.shape());
      t.tape_uid_ = tape->uid();
    }
    return t;
  }
  static std::shared_ptr<const std::vector<T>> storage(const Tensor<T>& t) {
    return t.data_;
  }
};

}  // namespace detail

}  // namespace mambacsr
