#pragma once

#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmgen/autograd.hpp"

namespace mmgen {

template <class T>
using Matrix = ag::Matrix<T>;

enum class InitKind { Normal, Zeros, Ones, Identity };

struct Init {
    InitKind kind = InitKind::Normal;
    double stddev = 0.02;

    static Init normal(double s) { return {InitKind::Normal, s}; }
    static Init zeros() { return {InitKind::Zeros, 0.0}; }
    static Init ones() { return {InitKind::Ones, 0.0}; }
};

// Named parameters in registration order. Registration order is the
// checkpoint order and the initialization order, so it must not depend on
// anything but the config.
template <class T>
class ParameterStore {
public:
    ag::Parameter<T>& add(const std::string& name, int rows, int cols, ag::ParamGroup group, Init init,
                          std::mt19937_64& rng) {
        if (index_.count(name)) throw std::invalid_argument("params: duplicate parameter " + name);
        auto p = std::make_unique<ag::Parameter<T>>();
        p->name = name;
        p->group = group;
        p->value.resize(rows, cols);
        switch (init.kind) {
            case InitKind::Normal: {
                std::normal_distribution<double> dist(0.0, init.stddev);
                for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = static_cast<T>(dist(rng));
                break;
            }
            case InitKind::Zeros: p->value.setZero(); break;
            case InitKind::Ones: p->value.setOnes(); break;
            case InitKind::Identity: p->value.setIdentity(); break;
        }
        p->zero_grad();
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return *params_.back();
    }

    ag::Parameter<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("params: no parameter " + name);
        return *params_[it->second];
    }
    const ag::Parameter<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("params: no parameter " + name);
        return *params_[it->second];
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return params_.size(); }
    ag::Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
    const ag::Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

    long long element_count() const {
        long long n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

private:
    std::vector<std::unique_ptr<ag::Parameter<T>>> params_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace mmgen
