#include <math.h>
#include <stdio.h>
#include <string.h>

#include "grcsam.h"

#define CHECK(cond)                                                   \
  do {                                                                \
    if (!(cond)) {                                                    \
      fprintf(stderr, "line %d: %s (%s)\n", __LINE__, #cond,          \
              grc_last_error());                                      \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(int argc, char **argv) {
  if (argc != 2) {
    fprintf(stderr, "usage: smoke <out-dir>\n");
    return 2;
  }
  uint64_t flops = 0;
  CHECK(grc_flops(GRC_MECHANISM_WSSA, 64, 64, 256, 6, 0.5, false, &flops) == GRC_STATUS_OK);
  CHECK(flops == 1073889280ULL);

  size_t shape[4] = {1, 1, 1, 1};
  double p = 0.3, t = 1.0;
  GrcTensor *pred = NULL, *target = NULL;
  CHECK(grc_tensor_new(GRC_DTYPE_F64, shape, 4, &p, &pred) == GRC_STATUS_OK);
  CHECK(grc_tensor_new(GRC_DTYPE_F64, shape, 4, &t, &target) == GRC_STATUS_OK);
  double focal = 0.0;
  CHECK(grc_focal_loss(pred, target, 2.0, 0.25, &focal) == GRC_STATUS_OK);
  CHECK(fabs(focal - 0.14748666853) < 1e-9);

  size_t bad_shape[2] = {1, 2};
  double bad[2] = {0.5, 1.0};
  GrcTensor *bad_target = NULL;
  CHECK(grc_tensor_new(GRC_DTYPE_F64, bad_shape, 2, bad, &bad_target) == GRC_STATUS_OK);
  CHECK(grc_focal_loss(pred, bad_target, 2.0, 0.25, &focal) != GRC_STATUS_OK);
  CHECK(strlen(grc_last_error()) > 0);

  GrcPipeline *pipe = NULL;
  CHECK(grc_pipeline_new(&pipe) == GRC_STATUS_OK);
  const char *keys[] = {"coarse_h", "coarse_w", "fine_scale", "out_h", "out_w",
                        "C", "heads", "coarse_heads", "window"};
  const char *vals[] = {"8", "8", "2", "32", "32", "16", "4", "2", "3"};
  for (int i = 0; i < 9; i++) {
    CHECK(grc_pipeline_set(pipe, keys[i], vals[i]) == GRC_STATUS_OK);
  }
  CHECK(grc_pipeline_set(pipe, "no_such_key", "1") == GRC_STATUS_CONFIG);
  GrcTensor *fine = NULL;
  CHECK(grc_pipeline_run(pipe, NULL, &fine) == GRC_STATUS_OK);
  size_t dims[4] = {0};
  CHECK(grc_tensor_shape(fine, dims, 4) == GRC_STATUS_OK);
  CHECK(dims[0] == 1 && dims[1] == 1 && dims[2] == 32 && dims[3] == 32);
  CHECK(grc_pipeline_write_outputs(pipe, argv[1]) == GRC_STATUS_OK);

  grc_tensor_free(fine);
  grc_tensor_free(bad_target);
  grc_tensor_free(target);
  grc_tensor_free(pred);
  grc_pipeline_free(pipe);
  printf("ok %s\n", grc_version());
  return 0;
}
