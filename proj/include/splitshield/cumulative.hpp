#pragma once

// Per-block signal-content log ratio of a trained network and its running sum.

#include <cmath>
#include <cstddef>
#include <vector>

#include "splitshield/error.hpp"
#include "splitshield/linalg.hpp"
#include "splitshield/nn/model.hpp"
#include "splitshield/obfuscator.hpp"

namespace splitshield::obf {

struct LayerSignal {
  std::size_t split_index = 0;
  std::size_t n = 0;           // feature length entering the block
  std::size_t r = 0;           // signal dimension of the block's first layer
  double mean_log_ratio = 0.0;  // mean C_S over examples with nonzero activation
  double cumulative = 0.0;      // sum of mean_log_ratio over blocks <= this one
  std::size_t used = 0;
  std::size_t skipped = 0;      // examples with an all-zero activation
};

/// C_S of the input of every block that starts with a conv/fc layer, averaged over `x`.
inline std::vector<LayerSignal> cumulative_signal_content(const nn::SplitModel& model, const nn::Batch& x,
                                                          std::size_t chunk = 256) {
  require(x.n > 0, Errc::EmptySplit, "cumulative signal content needs a non-empty dataset");
  std::vector<std::size_t> blocks;
  std::vector<linalg::SvdBasis> bases;
  for (std::size_t b = 1; b <= model.num_blocks(); ++b) {
    if (!nn::is_linear(model.layers[model.block_starts[b - 1]])) continue;
    blocks.push_back(b);
    bases.push_back(linalg::svd(nn::split_weight(model, b)));
  }
  std::vector<double> sums(blocks.size(), 0.0);
  std::vector<LayerSignal> out(blocks.size());
  for (std::size_t start = 0; start < x.n; start += chunk) {
    const std::size_t cnt = std::min(chunk, x.n - start);
    std::vector<std::size_t> idx(cnt);
    for (std::size_t i = 0; i < cnt; ++i) idx[i] = start + i;
    const nn::ForwardPass pass = nn::forward(model, nn::gather(x, idx), nn::Mode::Eval);
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      const nn::Batch& z = pass.input_of(model.block_starts[blocks[k] - 1]);
      for (std::size_t e = 0; e < cnt; ++e) {
        const double cs = signal_log_ratio(z.example(e), bases[k]);
        if (std::isnan(cs)) {
          ++out[k].skipped;
          continue;
        }
        sums[k] += cs;
        ++out[k].used;
      }
    }
  }
  double run = 0.0;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    out[k].split_index = blocks[k];
    out[k].n = bases[k].n;
    out[k].r = bases[k].rank_bound();
    out[k].mean_log_ratio = out[k].used ? sums[k] / static_cast<double>(out[k].used) : 0.0;
    run += out[k].mean_log_ratio;
    out[k].cumulative = run;
  }
  return out;
}

}  // namespace splitshield::obf
