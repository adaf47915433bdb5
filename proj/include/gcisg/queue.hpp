#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gcisg/serialize.hpp"
#include "gcisg/tensor.hpp"

namespace gcisg {

// FIFO ring buffer of unit-norm support embeddings q_k. Single writer (the
// training loop); snapshots are detached copies safe to hold across enqueues.
class SupportQueue {
public:
    SupportQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {
        if (capacity < 2) throw ConfigError("support queue capacity must be >= 2");
        if (dim < 1) throw ConfigError("support queue dim must be >= 1");
        buf_.resize(capacity * dim);
    }

    std::size_t capacity() const { return capacity_; }
    std::size_t dim() const { return dim_; }
    std::size_t fill() const { return fill_; }
    bool full() const { return fill_ == capacity_; }

    // Appends rows of a [N,d] or [d] tensor in row order, evicting the oldest
    // entries once full. Rows must be unit-norm within 1e-10.
    void enqueue(const Tensor& z) {
        if (!(z.rank() == 1 && z.shape()[0] == dim_) &&
            !(z.rank() == 2 && z.shape()[1] == dim_))
            throw ShapeError("enqueue: expected [" + std::to_string(dim_) + "] or [N," +
                             std::to_string(dim_) + "], got " + shape_str(z.shape()));
        const std::size_t rows = z.rank() == 1 ? 1 : z.shape()[0];
        const auto v = z.data();
        for (std::size_t r = 0; r < rows; ++r) {
            double sq = 0.0;
            for (std::size_t i = 0; i < dim_; ++i) sq += v[r * dim_ + i] * v[r * dim_ + i];
            if (std::abs(std::sqrt(sq) - 1.0) > 1e-10)
                throw DegenerateInputError("enqueue: row " + std::to_string(r) +
                                           " is not unit-norm (|q| = " +
                                           std::to_string(std::sqrt(sq)) + ")");
            std::copy(v.begin() + static_cast<std::ptrdiff_t>(r * dim_),
                      v.begin() + static_cast<std::ptrdiff_t>((r + 1) * dim_),
                      buf_.begin() + static_cast<std::ptrdiff_t>(cursor_ * dim_));
            cursor_ = (cursor_ + 1) % capacity_;
            if (fill_ < capacity_) ++fill_;
        }
    }

    // Detached [fill, d] snapshot, oldest entry first.
    Tensor snapshot() const {
        if (fill_ == 0) throw DegenerateInputError("support queue is empty");
        std::vector<double> out(fill_ * dim_);
        const std::size_t oldest = full() ? cursor_ : 0;
        for (std::size_t r = 0; r < fill_; ++r) {
            const std::size_t src = (oldest + r) % capacity_;
            std::copy(buf_.begin() + static_cast<std::ptrdiff_t>(src * dim_),
                      buf_.begin() + static_cast<std::ptrdiff_t>((src + 1) * dim_),
                      out.begin() + static_cast<std::ptrdiff_t>(r * dim_));
        }
        return Tensor::from_data({fill_, dim_}, std::move(out));
    }

    // Checkpoint form: `<prefix>` holds the FIFO-ordered entries, or a [1]
    // zero sentinel when empty (the format has no empty tensors);
    // `<prefix>.meta` holds {fill}.
    void save(TensorTable& table, const std::string& prefix) const {
        if (fill_ == 0)
            table[prefix] = Tensor::zeros({1});
        else
            table[prefix] = snapshot();
        table[prefix + ".meta"] = Tensor::from_data({1}, {static_cast<double>(fill_)});
    }

    void load(const TensorTable& table, const std::string& prefix) {
        const auto it = table.find(prefix);
        const auto mit = table.find(prefix + ".meta");
        if (it == table.end() || mit == table.end())
            throw IoError("checkpoint missing queue entry '" + prefix + "'");
        const std::size_t fill = static_cast<std::size_t>(mit->second.data()[0]);
        std::fill(buf_.begin(), buf_.end(), 0.0);
        cursor_ = 0;
        fill_ = 0;
        if (fill == 0) return;
        const Tensor& snap = it->second;
        if (snap.rank() != 2 || snap.shape()[0] != fill || snap.shape()[1] != dim_)
            throw IoError("checkpoint queue entry '" + prefix + "' has shape " +
                          shape_str(snap.shape()) + ", expected [" + std::to_string(fill) + "," +
                          std::to_string(dim_) + "]");
        enqueue(snap);
    }

private:
    std::size_t capacity_;
    std::size_t dim_;
    std::vector<double> buf_;
    std::size_t cursor_ = 0;
    std::size_t fill_ = 0;
};

}  // namespace gcisg
