#include <stdio.h>
#include <stdlib.h>

#include "amgan.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        return 2;
    }
    AmganModel *model = NULL;
    if (amgan_model_load(argv[1], &model) != AMGAN_STATUS_OK) {
        fprintf(stderr, "%s\n", amgan_last_error());
        return 1;
    }
    size_t dim = 0, observed = 0, horizon = 0;
    amgan_model_dims(model, &dim, &observed, &horizon);
    double *in = calloc(observed * dim, sizeof(double));
    double *out = calloc(horizon * dim, sizeof(double));
    for (size_t i = 0; i < observed * dim; i++) {
        in[i] = 0.001 * (double)i;
    }
    AmganStatus s = amgan_model_predict(model, in, observed, out, horizon * dim);
    if (s != AMGAN_STATUS_OK) {
        fprintf(stderr, "%s\n", amgan_last_error());
        return 1;
    }
    printf("%zu %zu %zu %.17g\n", dim, observed, horizon, out[horizon * dim - 1]);
    if (amgan_model_load("/nonexistent.ckpt", &model) != AMGAN_STATUS_IO) {
        return 1;
    }
    amgan_model_free(model);
    free(in);
    free(out);
    return 0;
}
