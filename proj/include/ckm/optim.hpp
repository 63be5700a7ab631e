#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ckm/tensor.hpp"

namespace ckm {

namespace detail {

inline void write_u16(std::ostream& os, uint16_t v) { os.write(reinterpret_cast<char*>(&v), 2); }
inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
inline void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
inline void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<char*>(&v), 8); }

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw std::runtime_error(msg("param blob: truncated while reading ", what));
    return v;
}

}  // namespace detail

// Ordered registry of named trainable tensors. Registration order is the
// canonical order for optimizer state and for the serialized blob.
class ParamStore {
public:
    Tensor add(const std::string& name, std::vector<int> shape, std::vector<double> init) {
        if (index_.count(name))
            throw std::invalid_argument(msg("ParamStore: duplicate parameter \"", name, "\""));
        Tensor t = Tensor::param(std::move(shape), std::move(init));
        index_[name] = items_.size();
        items_.emplace_back(name, t);
        return t;
    }

    Tensor get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw std::invalid_argument(msg("ParamStore: unknown parameter \"", name, "\""));
        return items_[it->second].second;
    }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

    size_t total_params() const {
        size_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

    // Flat little-endian f64 blob with a name -> (offset, shape) index.
    void save_blob(std::ostream& os) const {
        detail::write_u32(os, static_cast<uint32_t>(items_.size()));
        uint64_t offset = 0;
        for (const auto& [name, t] : items_) {
            if (name.size() > 0xffff) throw std::logic_error("ParamStore: name too long");
            detail::write_u16(os, static_cast<uint16_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_u16(os, static_cast<uint16_t>(t.shape().size()));
            for (int d : t.shape()) detail::write_u32(os, static_cast<uint32_t>(d));
            detail::write_u64(os, offset);
            offset += t.numel();
        }
        detail::write_u64(os, offset);
        for (const auto& [name, t] : items_)
            os.write(reinterpret_cast<const char*>(t.value().data()),
                     static_cast<std::streamsize>(t.numel() * 8));
        if (!os) throw std::runtime_error("ParamStore: blob write failed");
    }

    // Loads values into the already-registered parameters; the blob must
    // describe exactly the same names and shapes in the same order.
    void load_blob(std::istream& is) {
        uint32_t n = detail::read_pod<uint32_t>(is, "entry count");
        if (n != items_.size())
            throw std::runtime_error(msg("param blob: holds ", n, " entries, expected ",
                                         items_.size()));
        uint64_t expect_offset = 0;
        for (auto& [name, t] : items_) {
            uint16_t len = detail::read_pod<uint16_t>(is, "name length");
            std::string bname(len, '\0');
            if (!is.read(bname.data(), len))
                throw std::runtime_error("param blob: truncated name");
            if (bname != name)
                throw std::runtime_error(
                    msg("param blob: entry \"", bname, "\" does not match parameter \"", name, "\""));
            uint16_t ndim = detail::read_pod<uint16_t>(is, "rank");
            std::vector<int> shape(ndim);
            for (auto& d : shape) d = static_cast<int>(detail::read_pod<uint32_t>(is, "dim"));
            if (shape != t.shape())
                throw std::runtime_error(msg("param blob: \"", name, "\" has shape ",
                                             shape_str(shape), ", expected ", shape_str(t.shape())));
            uint64_t off = detail::read_pod<uint64_t>(is, "offset");
            if (off != expect_offset)
                throw std::runtime_error(msg("param blob: \"", name, "\" at offset ", off,
                                             ", expected ", expect_offset));
            expect_offset += t.numel();
        }
        uint64_t total = detail::read_pod<uint64_t>(is, "total size");
        if (total != expect_offset)
            throw std::runtime_error(msg("param blob: payload of ", total, " doubles, expected ",
                                         expect_offset));
        for (auto& [name, t] : items_) {
            std::vector<double> v(t.numel());
            if (!is.read(reinterpret_cast<char*>(v.data()),
                         static_cast<std::streamsize>(v.size() * 8)))
                throw std::runtime_error(msg("param blob: truncated payload at \"", name, "\""));
            t.set_value(v);
        }
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, size_t> index_;
};

// Adam with decoupled weight decay. Parameters that received no gradient in
// the current accumulation window are left untouched, moments included.
class AdamW {
public:
    explicit AdamW(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    double& lr() { return lr_; }
    long step_count() const { return step_; }

    void step(ParamStore& params) {
        ensure_state(params);
        ++step_;
        double bc1 = 1.0 - std::pow(b1_, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(b2_, static_cast<double>(step_));
        for (size_t pi = 0; pi < params.items().size(); ++pi) {
            Tensor t = params.items()[pi].second;
            if (!t.has_grad()) continue;
            const std::vector<double>& g = t.grad();
            std::vector<double> v = t.value();
            std::vector<double>& m1 = m_[pi];
            std::vector<double>& m2 = v_[pi];
            for (size_t i = 0; i < v.size(); ++i) {
                m1[i] = b1_ * m1[i] + (1.0 - b1_) * g[i];
                m2[i] = b2_ * m2[i] + (1.0 - b2_) * g[i] * g[i];
                double mhat = m1[i] / bc1;
                double vhat = m2[i] / bc2;
                v[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * v[i]);
            }
            t.set_value(v);
        }
    }

    void serialize(std::ostream& os) const {
        detail::write_u64(os, static_cast<uint64_t>(step_));
        detail::write_f64(os, lr_);
        detail::write_u32(os, static_cast<uint32_t>(m_.size()));
        for (size_t pi = 0; pi < m_.size(); ++pi) {
            detail::write_u64(os, m_[pi].size());
            os.write(reinterpret_cast<const char*>(m_[pi].data()),
                     static_cast<std::streamsize>(m_[pi].size() * 8));
            os.write(reinterpret_cast<const char*>(v_[pi].data()),
                     static_cast<std::streamsize>(v_[pi].size() * 8));
        }
        if (!os) throw std::runtime_error("AdamW: state write failed");
    }

    void deserialize(std::istream& is, const ParamStore& params) {
        step_ = static_cast<long>(detail::read_pod<uint64_t>(is, "step count"));
        lr_ = detail::read_pod<double>(is, "learning rate");
        uint32_t n = detail::read_pod<uint32_t>(is, "state count");
        if (n != params.items().size())
            throw std::runtime_error(msg("AdamW state: ", n, " entries, expected ",
                                         params.items().size()));
        m_.assign(n, {});
        v_.assign(n, {});
        for (size_t pi = 0; pi < n; ++pi) {
            uint64_t sz = detail::read_pod<uint64_t>(is, "moment size");
            if (sz != params.items()[pi].second.numel())
                throw std::runtime_error(msg("AdamW state: entry ", pi, " holds ", sz,
                                             " values, expected ",
                                             params.items()[pi].second.numel()));
            m_[pi].resize(sz);
            v_[pi].resize(sz);
            if (!is.read(reinterpret_cast<char*>(m_[pi].data()),
                         static_cast<std::streamsize>(sz * 8)) ||
                !is.read(reinterpret_cast<char*>(v_[pi].data()),
                         static_cast<std::streamsize>(sz * 8)))
                throw std::runtime_error("AdamW state: truncated moments");
        }
    }

private:
    void ensure_state(const ParamStore& params) {
        if (m_.size() == params.items().size()) return;
        if (!m_.empty()) throw std::logic_error("AdamW: parameter set changed under the optimizer");
        m_.resize(params.items().size());
        v_.resize(params.items().size());
        for (size_t pi = 0; pi < params.items().size(); ++pi) {
            m_[pi].assign(params.items()[pi].second.numel(), 0.0);
            v_[pi].assign(params.items()[pi].second.numel(), 0.0);
        }
    }

    double lr_, wd_, b1_, b2_, eps_;
    long step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace ckm
