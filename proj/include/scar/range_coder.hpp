#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "scar/common.hpp"

namespace scar {

// All streams use 16-bit frequencies: total 2^16 matches the entropy model's
// probability floor of 2^-16, so no predicted symbol can quantize to zero.
inline constexpr uint32_t kCdfTotal = 1u << 16;

// Cumulative frequencies over K symbols: cum[0] = 0, cum[K] = 2^16, strictly
// increasing (every symbol has frequency >= 1).
struct QuantizedCdf {
    std::vector<uint32_t> cum;

    int symbols() const { return static_cast<int>(cum.size()) - 1; }
    uint32_t lower(int s) const { return cum[static_cast<size_t>(s)]; }
    uint32_t freq(int s) const { return cum[static_cast<size_t>(s) + 1] - cum[static_cast<size_t>(s)]; }

    int find(uint32_t value) const {
        // Largest s with cum[s] <= value.
        auto it = std::upper_bound(cum.begin(), cum.end(), value);
        return static_cast<int>(it - cum.begin()) - 1;
    }
};

// Rounds probabilities to 16-bit frequencies with a largest-remainder repair
// pass: total exactly 2^16, every frequency >= 1, deterministic.
inline QuantizedCdf quantize_cdf(const VecX& probs) {
    const int k = static_cast<int>(probs.size());
    if (k < 1) throw DataError("quantize_cdf: empty distribution");
    if (k >= static_cast<int>(kCdfTotal)) throw DataError("quantize_cdf: too many symbols");
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
        if (!std::isfinite(probs(i)) || probs(i) < 0.0)
            throw DataError("quantize_cdf: non-finite or negative probability");
        sum += probs(i);
    }
    if (sum <= 0.0) throw DataError("quantize_cdf: zero-mass distribution");

    std::vector<int64_t> freq(k);
    std::vector<double> remainder(k);
    int64_t total = 0;
    for (int i = 0; i < k; ++i) {
        double raw = probs(i) / sum * static_cast<double>(kCdfTotal);
        int64_t f = std::llround(raw);
        if (f < 1) f = 1;
        freq[i] = f;
        remainder[i] = raw - static_cast<double>(f);
        total += f;
    }

    std::vector<int> order(k);
    std::iota(order.begin(), order.end(), 0);
    if (total < static_cast<int64_t>(kCdfTotal)) {
        // Grant the deficit to the symbols that were rounded down hardest.
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return remainder[a] > remainder[b]; });
        int64_t deficit = static_cast<int64_t>(kCdfTotal) - total;
        size_t at = 0;
        while (deficit > 0) {
            freq[order[at % order.size()]] += 1;
            ++at;
            --deficit;
        }
    } else if (total > static_cast<int64_t>(kCdfTotal)) {
        // Take the surplus from the symbols that were rounded up hardest,
        // never below frequency 1.
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return remainder[a] < remainder[b]; });
        int64_t surplus = total - static_cast<int64_t>(kCdfTotal);
        size_t at = 0;
        while (surplus > 0) {
            int i = order[at % order.size()];
            if (freq[i] > 1) {
                freq[i] -= 1;
                --surplus;
            }
            ++at;
        }
    }

    QuantizedCdf cdf;
    cdf.cum.resize(static_cast<size_t>(k) + 1);
    cdf.cum[0] = 0;
    for (int i = 0; i < k; ++i) cdf.cum[static_cast<size_t>(i) + 1] = cdf.cum[i] + static_cast<uint32_t>(freq[i]);
    return cdf;
}

// 32-bit range coder, byte-wise renormalization, 64-bit low register with
// explicit carry resolution (no range truncation). Overhead per stream is one
// leading byte plus a 5-byte flush.
class RangeEncoder {
public:
    void encode(const QuantizedCdf& cdf, int symbol) {
        if (symbol < 0 || symbol >= cdf.symbols())
            throw DataError("range encoder: symbol out of range");
        range_ /= kCdfTotal;
        low_ += static_cast<uint64_t>(cdf.lower(symbol)) * range_;
        range_ *= cdf.freq(symbol);
        while (range_ < kTop) {
            shift_low();
            range_ <<= 8;
        }
    }

    std::vector<uint8_t> finish() {
        for (int i = 0; i < 5; ++i) shift_low();
        return std::move(out_);
    }

private:
    static constexpr uint32_t kTop = 1u << 24;

    void shift_low() {
        if (static_cast<uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
            uint8_t carry = static_cast<uint8_t>(low_ >> 32);
            uint8_t byte = static_cast<uint8_t>(cache_ + carry);
            do {
                out_.push_back(byte);
                byte = static_cast<uint8_t>(0xFF + carry);
            } while (--pending_ != 0);
            cache_ = static_cast<uint8_t>(low_ >> 24);
        }
        ++pending_;
        low_ = (low_ & 0x00FFFFFFull) << 8;
    }

    std::vector<uint8_t> out_;
    uint64_t low_ = 0;
    uint32_t range_ = 0xFFFFFFFFu;
    uint8_t cache_ = 0;
    uint64_t pending_ = 1;
};

class RangeDecoder {
public:
    RangeDecoder(const uint8_t* data, size_t size) : data_(data), size_(size) {
        next_byte();  // leading byte emitted by the encoder's first shift
        for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
    }
    explicit RangeDecoder(const std::vector<uint8_t>& buf) : RangeDecoder(buf.data(), buf.size()) {}

    int decode(const QuantizedCdf& cdf) {
        range_ /= kCdfTotal;
        uint32_t value = code_ / range_;
        if (value >= kCdfTotal) value = kCdfTotal - 1;
        int symbol = cdf.find(value);
        code_ -= cdf.lower(symbol) * range_;
        range_ *= cdf.freq(symbol);
        while (range_ < kTop) {
            code_ = (code_ << 8) | next_byte();
            range_ <<= 8;
        }
        return symbol;
    }

    size_t consumed() const { return pos_; }

private:
    static constexpr uint32_t kTop = 1u << 24;

    uint8_t next_byte() {
        if (pos_ >= size_) throw IntegrityError("coded stream truncated");
        return data_[pos_++];
    }

    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
    uint32_t code_ = 0;
    uint32_t range_ = 0xFFFFFFFFu;
};

inline std::vector<uint8_t> encode_stream(const std::vector<int>& symbols,
                                          const std::vector<QuantizedCdf>& cdfs) {
    if (symbols.size() != cdfs.size()) throw DataError("encode_stream: cdf count mismatch");
    RangeEncoder enc;
    for (size_t i = 0; i < symbols.size(); ++i) enc.encode(cdfs[i], symbols[i]);
    return enc.finish();
}

// `provider(i, prefix)` must return the same cdf sequence the encoder used;
// with an autoregressive model it derives each cdf from the decoded prefix.
inline std::vector<int> decode_stream(
    const std::vector<uint8_t>& bytes, size_t count,
    const std::function<QuantizedCdf(size_t, const std::vector<int>&)>& provider) {
    std::vector<int> symbols;
    if (count == 0) return symbols;
    RangeDecoder dec(bytes);
    symbols.reserve(count);
    for (size_t i = 0; i < count; ++i) symbols.push_back(dec.decode(provider(i, symbols)));
    return symbols;
}

}  // namespace scar
