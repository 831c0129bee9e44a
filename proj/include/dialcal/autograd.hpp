#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation applied to its Vars. Values are computed
// eagerly; calling Tape::backward(loss) propagates adjoints in reverse order
// and accumulates parameter gradients into Parameter::grad. A tape built with
// record = false skips the backward bookkeeping and serves forward-only work
// (decoding, rollouts, scoring).

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dialcal {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// A named trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  // Written by Tape::backward even when the owning model is held const.
  mutable Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}

  void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  double scalar() const { return value()(0, 0); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix grad;
    const Matrix* external = nullptr;  // parameter leaves alias the parameter value
    const Parameter* param = nullptr;
    std::function<void(Tape&, const Node&)> backward;

    const Matrix& val() const { return external ? *external : value; }
  };

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  const Matrix& value(std::size_t id) const { return nodes_[id].val(); }

  Var constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var scalar_constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

  /// Leaf bound to a parameter. Repeated calls on the same parameter share a node.
  Var param(const Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    Node n;
    n.external = &p.value;
    n.param = &p;
    Var v = push(std::move(n));
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  /// Creates a node with the given value and backward rule. The rule is
  /// dropped when the tape does not record.
  Var emit(Matrix value, std::function<void(Tape&, const Node&)> backward) {
    Node n;
    n.value = std::move(value);
    if (record_) n.backward = std::move(backward);
    return push(std::move(n));
  }

  /// Adds `delta` into the adjoint of node `id`.
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      n.grad = delta;
    } else {
      n.grad += delta;
    }
  }

  /// Adds `delta` into row `row` of a parameter's gradient (sparse lookups).
  template <typename Derived>
  static void accumulate_param_row(const Parameter& p, Eigen::Index row,
                                   const Eigen::MatrixBase<Derived>& delta) {
    p.grad.row(row) += delta;
  }

  /// Backpropagates from a 1x1 loss node; parameter gradients are added to
  /// whatever Parameter::grad already holds.
  void backward(const Var& loss) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    if (loss.tape() != this) throw std::logic_error("loss belongs to another tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("loss must be scalar");
    accumulate(loss.id(), Matrix::Ones(1, 1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.param != nullptr) {
        n.param->grad += n.grad;
      } else if (n.backward) {
        n.backward(*this, n);
      }
    }
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  bool record_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

namespace ag {

namespace detail {
inline Tape& tape_of(const Var& a) { return *a.tape(); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

inline double sigmoid(double x) { return detail::sigmoid(x); }

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.emit(a.value() * b.value(), [ia, ib](Tape& tp, const Tape::Node& n) {
    tp.accumulate(ia, n.grad * tp.value(ib).transpose());
    tp.accumulate(ib, tp.value(ia).transpose() * n.grad);
  });
}

/// W x + b with b broadcast across the columns of x.
inline Var affine(const Var& w, const Var& x, const Var& b) {
  Tape& t = detail::tape_of(x);
  const std::size_t iw = w.id(), ix = x.id(), ib = b.id();
  Matrix out = w.value() * x.value();
  out.colwise() += b.value().col(0);
  return t.emit(std::move(out), [iw, ix, ib](Tape& tp, const Tape::Node& n) {
    tp.accumulate(iw, n.grad * tp.value(ix).transpose());
    tp.accumulate(ix, tp.value(iw).transpose() * n.grad);
    tp.accumulate(ib, n.grad.rowwise().sum());
  });
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.emit(a.value() + b.value(), [ia, ib](Tape& tp, const Tape::Node& n) {
    tp.accumulate(ia, n.grad);
    tp.accumulate(ib, n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.emit(a.value() - b.value(), [ia, ib](Tape& tp, const Tape::Node& n) {
    tp.accumulate(ia, n.grad);
    tp.accumulate(ib, -n.grad);
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.emit(a.value().cwiseProduct(b.value()), [ia, ib](Tape& tp, const Tape::Node& n) {
    tp.accumulate(ia, n.grad.cwiseProduct(tp.value(ib)));
    tp.accumulate(ib, n.grad.cwiseProduct(tp.value(ia)));
  });
}

inline Var scale(const Var& a, double s) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  return t.emit(a.value() * s, [ia, s](Tape& tp, const Tape::Node& n) { tp.accumulate(ia, n.grad * s); });
}

inline Var add_scalar(const Var& a, double s) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  return t.emit(a.value().array() + s, [ia](Tape& tp, const Tape::Node& n) { tp.accumulate(ia, n.grad); });
}

inline Var sigmoid(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) { return detail::sigmoid(x); });
  return t.emit(std::move(out), [ia](Tape& tp, const Tape::Node& n) {
    const Matrix& y = n.value;
    tp.accumulate(ia, n.grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

inline Var tanh(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().array().tanh().matrix();
  return t.emit(std::move(out), [ia](Tape& tp, const Tape::Node& n) {
    tp.accumulate(ia, n.grad.cwiseProduct((1.0 - n.value.array().square()).matrix()));
  });
}

inline Var relu(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().cwiseMax(0.0);
  return t.emit(std::move(out), [ia](Tape& tp, const Tape::Node& n) {
    tp.accumulate(ia, n.grad.cwiseProduct((tp.value(ia).array() > 0.0).cast<double>().matrix()));
  });
}

inline Var square(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  return t.emit(a.value().array().square().matrix(), [ia](Tape& tp, const Tape::Node& n) {
    tp.accumulate(ia, 2.0 * n.grad.cwiseProduct(tp.value(ia)));
  });
}

/// Sum of all entries, as a 1x1 node.
inline Var sum(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.emit(Matrix::Constant(1, 1, a.value().sum()), [ia, r, c](Tape& tp, const Tape::Node& n) {
    tp.accumulate(ia, Matrix::Constant(r, c, n.grad(0, 0)));
  });
}

inline Var sum(const std::vector<Var>& terms) {
  if (terms.empty()) throw std::invalid_argument("sum of no terms");
  Tape& t = detail::tape_of(terms.front());
  std::vector<std::size_t> ids;
  ids.reserve(terms.size());
  Matrix out = Matrix::Zero(terms.front().rows(), terms.front().cols());
  for (const Var& v : terms) {
    out += v.value();
    ids.push_back(v.id());
  }
  return t.emit(std::move(out), [ids](Tape& tp, const Tape::Node& n) {
    for (std::size_t id : ids) tp.accumulate(id, n.grad);
  });
}

inline Var transpose(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  return t.emit(a.value().transpose(), [ia](Tape& tp, const Tape::Node& n) {
    tp.accumulate(ia, n.grad.transpose());
  });
}

/// Rows [start, start + len) of a.
inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index len) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.emit(a.value().middleRows(start, len), [ia, start, len, r, c](Tape& tp, const Tape::Node& n) {
    Matrix g = Matrix::Zero(r, c);
    g.middleRows(start, len) = n.grad;
    tp.accumulate(ia, g);
  });
}

inline Var column(const Var& a, Eigen::Index j) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.emit(a.value().col(j), [ia, j, r, c](Tape& tp, const Tape::Node& n) {
    Matrix g = Matrix::Zero(r, c);
    g.col(j) = n.grad;
    tp.accumulate(ia, g);
  });
}

/// Vertical concatenation.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
  Tape& t = detail::tape_of(parts.front());
  const Eigen::Index c = parts.front().cols();
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
    r += p.rows();
  }
  Matrix out(r, c);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    off += p.rows();
  }
  return t.emit(std::move(out), [spans](Tape& tp, const Tape::Node& n) {
    Eigen::Index o = 0;
    for (auto [id, rows] : spans) {
      tp.accumulate(id, n.grad.middleRows(o, rows));
      o += rows;
    }
  });
}

/// Horizontal concatenation.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols of nothing");
  Tape& t = detail::tape_of(parts.front());
  const Eigen::Index r = parts.front().rows();
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
    c += p.cols();
  }
  Matrix out(r, c);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    off += p.cols();
  }
  return t.emit(std::move(out), [spans](Tape& tp, const Tape::Node& n) {
    Eigen::Index o = 0;
    for (auto [id, cols] : spans) {
      tp.accumulate(id, n.grad.middleCols(o, cols));
      o += cols;
    }
  });
}

/// Row `id` of an embedding table, returned as a column vector.
inline Var lookup(Tape& t, const Parameter& table, Eigen::Index id) {
  if (id < 0 || id >= table.value.rows()) throw std::out_of_range("lookup id out of range");
  const Parameter* p = &table;
  return t.emit(table.value.row(id).transpose(), [p, id](Tape&, const Tape::Node& n) {
    Tape::accumulate_param_row(*p, id, n.grad.transpose());
  });
}

/// Column-wise log-softmax of a column vector.
inline Var log_softmax(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  const Matrix& x = a.value();
  const double mx = x.maxCoeff();
  const double lse = mx + std::log((x.array() - mx).exp().sum());
  Matrix out = x.array() - lse;
  return t.emit(std::move(out), [ia](Tape& tp, const Tape::Node& n) {
    const Matrix p = n.value.array().exp();
    tp.accumulate(ia, n.grad - p * n.grad.sum());
  });
}

inline Var softmax(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  const Matrix& x = a.value();
  Matrix e = (x.array() - x.maxCoeff()).exp();
  e /= e.sum();
  return t.emit(std::move(e), [ia](Tape& tp, const Tape::Node& n) {
    const Matrix& y = n.value;
    const double dot = n.grad.cwiseProduct(y).sum();
    tp.accumulate(ia, y.cwiseProduct((n.grad.array() - dot).matrix()));
  });
}

/// Entry (row, 0) as a 1x1 node.
inline Var pick(const Var& a, Eigen::Index row) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.emit(Matrix::Constant(1, 1, a.value()(row, 0)), [ia, row, r, c](Tape& tp, const Tape::Node& n) {
    Matrix g = Matrix::Zero(r, c);
    g(row, 0) = n.grad(0, 0);
    tp.accumulate(ia, g);
  });
}

/// Row-wise max over columns (max-over-time pooling).
inline Var max_over_cols(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  const Matrix& x = a.value();
  const Eigen::Index r = x.rows(), c = x.cols();
  Matrix out(r, 1);
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(r));
  for (Eigen::Index i = 0; i < r; ++i) {
    Eigen::Index j = 0;
    out(i, 0) = x.row(i).maxCoeff(&j);
    arg[static_cast<std::size_t>(i)] = j;
  }
  return t.emit(std::move(out), [ia, arg, r, c](Tape& tp, const Tape::Node& n) {
    Matrix g = Matrix::Zero(r, c);
    for (Eigen::Index i = 0; i < r; ++i) g(i, arg[static_cast<std::size_t>(i)]) = n.grad(i, 0);
    tp.accumulate(ia, g);
  });
}

/// Stacks every run of `width` consecutive columns of x (rows d) into one
/// column of height width*d; the result has cols(x) - width + 1 columns.
inline Var unfold_windows(const Var& x, Eigen::Index width) {
  Tape& t = detail::tape_of(x);
  const std::size_t ix = x.id();
  const Matrix& v = x.value();
  const Eigen::Index d = v.rows(), len = v.cols();
  if (len < width) throw std::invalid_argument("unfold_windows: sequence shorter than window");
  const Eigen::Index positions = len - width + 1;
  Matrix out(width * d, positions);
  for (Eigen::Index p = 0; p < positions; ++p)
    for (Eigen::Index k = 0; k < width; ++k) out.block(k * d, p, d, 1) = v.col(p + k);
  return t.emit(std::move(out), [ix, width, d, len, positions](Tape& tp, const Tape::Node& n) {
    Matrix g = Matrix::Zero(d, len);
    for (Eigen::Index p = 0; p < positions; ++p)
      for (Eigen::Index k = 0; k < width; ++k) g.col(p + k) += n.grad.block(k * d, p, d, 1);
    tp.accumulate(ix, g);
  });
}

/// Fused LSTM nonlinearity. `gates` is the 4H pre-activation ordered
/// (input, forget, output, candidate); returns [h; c] stacked (2H x 1).
inline Var lstm_cell(const Var& gates, const Var& c_prev) {
  Tape& t = detail::tape_of(gates);
  const std::size_t ig = gates.id(), ic = c_prev.id();
  const Matrix& z = gates.value();
  const Eigen::Index h = z.rows() / 4;
  const Vector i = z.col(0).segment(0, h).unaryExpr([](double v) { return detail::sigmoid(v); });
  const Vector f = z.col(0).segment(h, h).unaryExpr([](double v) { return detail::sigmoid(v); });
  const Vector o = z.col(0).segment(2 * h, h).unaryExpr([](double v) { return detail::sigmoid(v); });
  const Vector g = z.col(0).segment(3 * h, h).array().tanh();
  const Vector c = f.cwiseProduct(c_prev.value().col(0)) + i.cwiseProduct(g);
  const Vector tc = c.array().tanh();
  Matrix out(2 * h, 1);
  out.col(0).head(h) = o.cwiseProduct(tc);
  out.col(0).tail(h) = c;
  return t.emit(std::move(out), [ig, ic, h, i, f, o, g, tc](Tape& tp, const Tape::Node& n) {
    const Vector dh = n.grad.col(0).head(h);
    const Vector dc = n.grad.col(0).tail(h) + dh.cwiseProduct(o).cwiseProduct((1.0 - tc.array().square()).matrix());
    const Vector& c_prev = tp.value(ic).col(0);
    Matrix dz(4 * h, 1);
    dz.col(0).segment(0, h) = dc.cwiseProduct(g).cwiseProduct(i.cwiseProduct((1.0 - i.array()).matrix()));
    dz.col(0).segment(h, h) = dc.cwiseProduct(c_prev).cwiseProduct(f.cwiseProduct((1.0 - f.array()).matrix()));
    dz.col(0).segment(2 * h, h) = dh.cwiseProduct(tc).cwiseProduct(o.cwiseProduct((1.0 - o.array()).matrix()));
    dz.col(0).segment(3 * h, h) = dc.cwiseProduct(i).cwiseProduct((1.0 - g.array().square()).matrix());
    tp.accumulate(ig, dz);
    tp.accumulate(ic, dc.cwiseProduct(f));
  });
}

}  // namespace ag
}  // namespace dialcal
