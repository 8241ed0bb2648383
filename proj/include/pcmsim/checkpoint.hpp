// SPDX-License-Identifier: Apache-2.0
#pragma once

// Network checkpoints: a UTF-8 text header describing the graph, tensors and
// training metadata, a line "payload", then every tensor as raw IEEE-754
// binary64 little-endian values in header order.
//
//   pcmsim-checkpoint 1
//   meta <key> <value>                     (eta_tr, clip_alpha, epoch, seed, ...)
//   history <count>
//   epoch <e> <lr> <train_loss> <train_acc> <test_acc>     x count
//   layers <count>
//   layer <kind> <name> <n_in> <in...> <out_ch> <kernel> <stride> <pad> <out_feat> <bias> <c> <h> <w>
//   bn <node> <p> <eps>                    (one per batch-norm node)
//   tensors <count>
//   tensor <node> <field> <length>         (field: weight bias mu sigma2 gamma beta)
//   payload
//   <sum(length) * 8 bytes>
//
// Reals in the header are C99 hexadecimal floats so they round-trip exactly.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pcmsim/error.hpp"
#include "pcmsim/network.hpp"
#include "pcmsim/noisy_training.hpp"
#include "pcmsim/weight_mapping.hpp"

namespace pcmsim {

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    bool operator==(const EpochLog&) const = default;
};

struct Checkpoint {
    NetworkSpec spec;
    NetworkParams params;
    double eta_tr = 0.0;
    double clip_alpha = std::numeric_limits<double>::infinity();
    std::size_t epoch = 0;
    std::uint64_t seed = 0;
    std::vector<EpochLog> history;

    std::vector<EpochRecord> lr_history() const {
        std::vector<EpochRecord> h;
        for (const auto& e : history) h.push_back({e.epoch, e.lr, e.train_accuracy});
        return h;
    }
    bool operator==(const Checkpoint&) const = default;
};

namespace detail {

/// Whitespace-separated tokens of a text header with byte offsets.
class HeaderReader {
public:
    explicit HeaderReader(std::istream& in) : in_(in) {}

    std::string word(const char* what) {
        skip_space();
        const std::uint64_t start = offset();
        std::string w;
        int ch;
        while ((ch = in_.peek()) != EOF && !std::isspace(ch)) w.push_back(static_cast<char>(take()));
        if (w.empty()) throw ParseError(std::string("checkpoint: expected ") + what + ", found end of input", start);
        last_ = start;
        return w;
    }
    void expect(const char* literal) {
        const auto w = word(literal);
        if (w != literal) throw ParseError(std::string("checkpoint: expected '") + literal + "', found '" + w + "'", last_);
    }
    std::uint64_t integer(const char* what) {
        const auto w = word(what);
        char* end = nullptr;
        const auto v = std::strtoull(w.c_str(), &end, 10);
        if (*end || w[0] == '-') throw ParseError(std::string("checkpoint: bad ") + what + " '" + w + "'", last_);
        return v;
    }
    double real(const char* what) {
        const auto w = word(what);
        char* end = nullptr;
        const double v = std::strtod(w.c_str(), &end);
        if (*end) throw ParseError(std::string("checkpoint: bad ") + what + " '" + w + "'", last_);
        return v;
    }
    /// Consumes the single newline ending the header.
    void end_line() {
        if (take() != '\n') throw ParseError("checkpoint: expected newline after 'payload'", pos_ - 1);
    }
    /// One little-endian binary64 from the payload.
    double f64() {
        unsigned char b[8];
        if (!in_.read(reinterpret_cast<char*>(b), 8)) throw ParseError("checkpoint: payload truncated", pos_);
        pos_ += 8;
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
        return std::bit_cast<double>(bits);
    }
    bool at_end() { return in_.peek() == EOF; }
    std::uint64_t offset() const noexcept { return pos_; }
    std::uint64_t last() const noexcept { return last_; }

private:
    void skip_space() {
        while (std::isspace(in_.peek())) take();
    }
    int take() {
        const int ch = in_.get();
        if (ch != EOF) ++pos_;
        return ch;
    }
    std::istream& in_;
    std::uint64_t pos_ = 0;
    std::uint64_t last_ = 0;
};

inline void write_f64_le(std::ostream& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
    out.write(reinterpret_cast<const char*>(b), 8);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
    using detail::hexfloat;
    const auto& spec = ck.spec;
    out << "pcmsim-checkpoint 1\n";
    out << "meta eta_tr " << hexfloat(ck.eta_tr) << "\n";
    out << "meta clip_alpha " << hexfloat(ck.clip_alpha) << "\n";
    out << "meta epoch " << ck.epoch << "\n";
    out << "meta seed " << ck.seed << "\n";
    out << "history " << ck.history.size() << "\n";
    for (const auto& e : ck.history)
        out << "epoch " << e.epoch << ' ' << hexfloat(e.lr) << ' ' << hexfloat(e.train_loss) << ' '
            << hexfloat(e.train_accuracy) << ' ' << hexfloat(e.test_accuracy) << "\n";
    out << "layers " << spec.size() << "\n";
    for (const auto& d : spec.layers()) {
        out << "layer " << to_string(d.kind) << ' ' << d.name << ' ' << d.inputs.size();
        for (auto i : d.inputs) out << ' ' << i;
        out << ' ' << d.out_channels << ' ' << d.kernel << ' ' << d.stride << ' ' << d.pad << ' ' << d.out_features
            << ' ' << (d.bias ? 1 : 0) << ' ' << d.shape.c << ' ' << d.shape.h << ' ' << d.shape.w << "\n";
    }
    struct Tensor {
        std::size_t node;
        const char* field;
        const std::vector<double>* data;
    };
    std::vector<Tensor> tensors;
    for (std::size_t i = 0; i < spec.size(); ++i) {
        const auto& p = ck.params.at(i);
        if (spec.layer(i).weighted()) {
            tensors.push_back({i, "weight", &p.weight.data});
            if (!p.bias.empty()) tensors.push_back({i, "bias", &p.bias});
        }
        if (spec.layer(i).kind == LayerKind::BatchNorm) {
            out << "bn " << i << ' ' << hexfloat(p.bn.p) << ' ' << hexfloat(p.bn.eps) << "\n";
            tensors.push_back({i, "mu", &p.bn.mu});
            tensors.push_back({i, "sigma2", &p.bn.sigma2});
            tensors.push_back({i, "gamma", &p.bn.gamma});
            tensors.push_back({i, "beta", &p.bn.beta});
        }
    }
    out << "tensors " << tensors.size() << "\n";
    for (const auto& t : tensors) out << "tensor " << t.node << ' ' << t.field << ' ' << t.data->size() << "\n";
    out << "payload\n";
    for (const auto& t : tensors)
        for (double v : *t.data) detail::write_f64_le(out, v);
}

inline Checkpoint read_checkpoint(std::istream& in) {
    detail::HeaderReader r(in);
    r.expect("pcmsim-checkpoint");
    if (r.integer("version") != 1) throw ParseError("checkpoint: unsupported version", r.last());
    Checkpoint ck;
    std::string w = r.word("section");
    while (w == "meta") {
        const auto key = r.word("meta key");
        if (key == "eta_tr") ck.eta_tr = r.real("eta_tr");
        else if (key == "clip_alpha") ck.clip_alpha = r.real("clip_alpha");
        else if (key == "epoch") ck.epoch = r.integer("epoch");
        else if (key == "seed") ck.seed = r.integer("seed");
        else r.word("meta value");  // unknown metadata is carried by newer writers; skip it
        w = r.word("section");
    }
    if (w != "history") throw ParseError("checkpoint: expected 'history', found '" + w + "'", r.last());
    const auto nh = r.integer("history count");
    for (std::uint64_t k = 0; k < nh; ++k) {
        r.expect("epoch");
        EpochLog e;
        e.epoch = r.integer("epoch");
        e.lr = r.real("lr");
        e.train_loss = r.real("train loss");
        e.train_accuracy = r.real("train accuracy");
        e.test_accuracy = r.real("test accuracy");
        ck.history.push_back(e);
    }
    r.expect("layers");
    const auto nl = r.integer("layer count");
    for (std::uint64_t k = 0; k < nl; ++k) {
        r.expect("layer");
        LayerDesc d;
        const auto kind = r.word("layer kind");
        try {
            d.kind = layer_kind_from_string(kind);
        } catch (const DomainError& e) {
            throw ParseError(std::string("checkpoint: ") + e.what(), r.last());
        }
        d.name = r.word("layer name");
        const auto nin = r.integer("input count");
        for (std::uint64_t i = 0; i < nin; ++i) d.inputs.push_back(r.integer("input index"));
        d.out_channels = r.integer("out_channels");
        d.kernel = r.integer("kernel");
        d.stride = r.integer("stride");
        d.pad = r.integer("pad");
        d.out_features = r.integer("out_features");
        d.bias = r.integer("bias flag") != 0;
        d.shape.c = r.integer("shape");
        d.shape.h = r.integer("shape");
        d.shape.w = r.integer("shape");
        const auto at = r.last();
        try {
            if (d.kind == LayerKind::Input) ck.spec = NetworkSpec(d.shape);
            else ck.spec.push(d);
        } catch (const DomainError& e) {
            throw ParseError(std::string("checkpoint: inconsistent layer: ") + e.what(), at);
        }
    }
    ck.params.assign(ck.spec.size(), LayerParams{});
    w = r.word("section");
    while (w == "bn") {
        const auto node = r.integer("bn node");
        if (node >= ck.spec.size() || ck.spec.layer(node).kind != LayerKind::BatchNorm)
            throw ParseError("checkpoint: 'bn' line names a non-batch-norm node", r.last());
        ck.params[node].bn.p = r.real("bn momentum");
        ck.params[node].bn.eps = r.real("bn eps");
        w = r.word("section");
    }
    if (w != "tensors") throw ParseError("checkpoint: expected 'tensors', found '" + w + "'", r.last());
    struct Slot {
        std::vector<double>* data;
        std::size_t length;
    };
    std::vector<Slot> slots;
    const auto nt = r.integer("tensor count");
    for (std::uint64_t k = 0; k < nt; ++k) {
        r.expect("tensor");
        const auto node = r.integer("tensor node");
        if (node >= ck.spec.size()) throw ParseError("checkpoint: tensor refers to a missing node", r.last());
        const auto field = r.word("tensor field");
        const auto len = r.integer("tensor length");
        auto& p = ck.params[node];
        std::vector<double>* target = nullptr;
        std::size_t expected = 0;
        const auto& d = ck.spec.layer(node);
        if (field == "weight" && d.weighted()) {
            p.weight = Matrix(ck.spec.fan_in(node), ck.spec.fan_out(node));
            target = &p.weight.data;
            expected = p.weight.data.size();
        } else if (field == "bias" && d.weighted()) {
            target = &p.bias;
            expected = ck.spec.fan_out(node);
        } else if (d.kind == LayerKind::BatchNorm &&
                   (field == "mu" || field == "sigma2" || field == "gamma" || field == "beta")) {
            target = field == "mu" ? &p.bn.mu : field == "sigma2" ? &p.bn.sigma2 : field == "gamma" ? &p.bn.gamma : &p.bn.beta;
            expected = ck.spec.shape(node).c;
        } else {
            throw ParseError("checkpoint: field '" + field + "' does not fit node " + std::to_string(node), r.last());
        }
        if (len != expected)
            throw ParseError("checkpoint: tensor length " + std::to_string(len) + " != expected " + std::to_string(expected), r.last());
        target->resize(len);
        slots.push_back({target, len});
    }
    r.expect("payload");
    r.end_line();
    for (const auto& s : slots)
        for (std::size_t k = 0; k < s.length; ++k) (*s.data)[k] = r.f64();
    if (!r.at_end()) throw ParseError("checkpoint: trailing bytes after payload", r.offset());
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
    write_checkpoint(out, ck);
    if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
    return read_checkpoint(in);
}

}  // namespace pcmsim
