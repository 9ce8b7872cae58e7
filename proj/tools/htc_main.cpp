#include "htc/evaluate.hpp"
#include "htc/trainer.hpp"
int main() {
  htc::PipelineConfig cfg = htc::PipelineConfig::with_defaults();
  htc::HtcModel<float> mf(cfg, 1);
  htc::HtcModel<double> md(cfg, 1);
  return mf.config().num_stages == md.config().num_stages ? 0 : 1;
}
