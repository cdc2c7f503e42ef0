#include "mambacsr/tensor.hpp"

#include <atomic>
#include <numeric>
#include <sstream>

namespace mambacsr {

namespace {
std::atomic<uint64_t> g_tape_uid{1};
}

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(std::vector<int64_t> shape, std::vector<T> data)
    : data_(std::make_shared<const std::vector<T>>(std::move(data))),
      shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_->size())) {
    throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                     " does not match shape " + shape_to_string(shape_));
  }
}

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<int64_t> shape) {
  const int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(static_cast<size_t>(n), T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<int64_t> shape, T value) {
  const int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(static_cast<size_t>(n), value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor({1}, std::vector<T>{value});
}

template <typename T>
int64_t Tensor<T>::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) {
    throw ShapeError("dim index " + std::to_string(i) + " out of range for rank " +
                     std::to_string(r));
  }
  return shape_[static_cast<size_t>(i)];
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw ShapeError("item() requires a 1-element tensor, shape is " +
                     shape_to_string(shape_));
  }
  return (*data_)[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw ShapeError("at(): " + std::to_string(idx.size()) + " indices for rank " +
                     std::to_string(rank()));
  }
  int64_t flat = 0;
  int64_t stride = 1;
  auto it = idx.end();
  for (int ax = rank() - 1; ax >= 0; --ax) {
    --it;
    const int64_t i = *it;
    const int64_t extent = shape_[static_cast<size_t>(ax)];
    if (i < 0 || i >= extent) {
      throw ShapeError("at(): index " + std::to_string(i) + " out of range on axis " +
                       std::to_string(ax) + " (extent " + std::to_string(extent) + ")");
    }
    flat += i * stride;
    stride *= extent;
  }
  return (*data_)[static_cast<size_t>(flat)];
}

template <typename T>
Tensor<T> Tensor<T>::detached() const {
  Tensor t;
  t.data_ = data_;
  t.shape_ = shape_;
  return t;
}

template <typename T>
Tape<T>::Tape() : uid_(g_tape_uid.fetch_add(1)) {}

template <typename T>
Tensor<T> Tape<T>::watch(const Tensor<T>& t) {
  if (!t.defined()) throw TapeError("watch() on an undefined tensor");
  if (t.tape_ == this && t.tape_uid_ == uid_ && t.vid_ >= 0) return t;
  Tensor<T> out = t.detached();
  out.tape_ = this;
  out.vid_ = alloc_value(t.shape());
  out.tape_uid_ = uid_;
  return out;
}

template <typename T>
int64_t Tape<T>::alloc_value(std::vector<int64_t> shape) {
  values_.push_back(ValueInfo{std::move(shape), {}});
  return static_cast<int64_t>(values_.size()) - 1;
}

template <typename T>
std::span<const T> Tape<T>::grad_view(int64_t vid) const {
  const auto& g = values_[static_cast<size_t>(vid)].grad;
  if (g.empty()) return {};
  return {g.data(), g.size()};
}

template <typename T>
std::vector<T>& Tape<T>::grad_accum(int64_t vid) {
  auto& info = values_[static_cast<size_t>(vid)];
  if (info.grad.empty()) {
    info.grad.assign(static_cast<size_t>(shape_numel(info.shape)), T(0));
  }
  return info.grad;
}

template <typename T>
void Tape<T>::record(std::function<void(Tape&)> fn) {
  records_.push_back(std::move(fn));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.tape_ != this || loss.tape_uid_ != uid_ || loss.vid_ < 0) {
    throw TapeError("backward(): loss is not recorded on this tape");
  }
  if (loss.size() != 1) {
    throw TapeError("backward(): loss must be a 1-element tensor, shape is " +
                    shape_to_string(loss.shape()));
  }
  if (ran_) {
    throw TapeError("backward() called twice without reset()");
  }
  ran_ = true;
  grad_accum(loss.vid_)[0] = T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    (*it)(*this);
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(const Tensor<T>& t) const {
  if (t.tape_ != this || t.vid_ < 0) {
    throw TapeError("grad(): tensor is not on this tape");
  }
  const auto& info = values_[static_cast<size_t>(t.vid_)];
  if (info.grad.empty()) {
    return Tensor<T>::zeros(info.shape);
  }
  return Tensor<T>(info.shape, info.grad);
}

template <typename T>
void Tape<T>::reset() {
  values_.clear();
  records_.clear();
  ran_ = false;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace mambacsr
