#pragma once

#include <cstdint>
#include <vector>

#include "dia/config.hpp"
#include "dia/numerics/array.hpp"

namespace dia {

/// Paired observations for B samples. Images are flattened H*W*C (row-major y, x, c).
struct ModalityBatch {
  int batch = 0;
  Array images;                      // [B x H*W*C]
  std::vector<int> contexts;         // [B x S_L]
  std::vector<int> reports;          // [B x T]
  std::vector<std::uint8_t> lang_present;

  int context_len() const { return batch ? static_cast<int>(contexts.size()) / batch : 0; }
  int report_len() const { return batch ? static_cast<int>(reports.size()) / batch : 0; }
  std::vector<int> context_row(int b) const {
    const int n = context_len();
    return {contexts.begin() + b * n, contexts.begin() + (b + 1) * n};
  }
  std::vector<int> report_row(int b) const {
    const int n = report_len();
    return {reports.begin() + b * n, reports.begin() + (b + 1) * n};
  }
  int present_count() const {
    int n = 0;
    for (auto p : lang_present) n += p ? 1 : 0;
    return n;
  }
};

/// [NULL, PAD, PAD, ...] of length n.
inline std::vector<int> null_context(int n) {
  std::vector<int> v(static_cast<std::size_t>(n), tokens::kPad);
  if (n > 0) v[0] = tokens::kNull;
  return v;
}

/// Replaces the context of sample b by the null sequence and clears its presence flag.
inline void strip_context(ModalityBatch& batch, int b) {
  const int n = batch.context_len();
  const auto nul = null_context(n);
  std::copy(nul.begin(), nul.end(), batch.contexts.begin() + b * n);
  batch.lang_present[static_cast<std::size_t>(b)] = 0;
}

inline void strip_all_contexts(ModalityBatch& batch) {
  for (int b = 0; b < batch.batch; ++b) strip_context(batch, b);
}

/// Throws unless every row is well formed for `m`.
inline void validate_batch(const ModalityBatch& batch, const ModelConfig& m) {
  const int px = m.image_size * m.image_size * m.image_channels;
  if (batch.batch < 1) throw ShapeError("batch: empty");
  if (batch.images.rows() != batch.batch || batch.images.cols() != px) {
    throw ShapeError("batch: images " + shape_str(batch.images.shape()) + ", expected [" +
                     std::to_string(batch.batch) + " x " + std::to_string(px) + "]");
  }
  if (batch.contexts.size() != static_cast<std::size_t>(batch.batch) * m.context_len)
    throw ShapeError("batch: context length mismatch");
  if (!batch.reports.empty() && batch.reports.size() != static_cast<std::size_t>(batch.batch) * m.report_len)
    throw ShapeError("batch: report length mismatch");
  if (batch.lang_present.size() != static_cast<std::size_t>(batch.batch)) throw ShapeError("batch: presence flags");
  for (int t : batch.contexts)
    if (t < 0 || t >= m.context_vocab) throw ConfigError("batch: context token " + std::to_string(t) + " out of vocabulary");
  for (int t : batch.reports)
    if (t < 0 || t >= m.report_vocab) throw ConfigError("batch: report token " + std::to_string(t) + " out of vocabulary");
  const auto nul = null_context(m.context_len);
  for (int b = 0; b < batch.batch; ++b) {
    if (!batch.lang_present[static_cast<std::size_t>(b)] && batch.context_row(b) != nul)
      throw ConfigError("batch: sample " + std::to_string(b) + " flagged absent but context is not the null sequence");
  }
}

}  // namespace dia
