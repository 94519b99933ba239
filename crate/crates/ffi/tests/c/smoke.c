#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "protofed.h"

#define CHECK(call)                                                              \
    do {                                                                         \
        PfStatus s_ = (call);                                                    \
        if (s_ != PF_STATUS_OK) {                                                \
            const char *m_ = pf_last_error_message();                            \
            fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_, m_ ? m_ : ""); \
            return 1;                                                            \
        }                                                                        \
    } while (0)

int main(void) {
    double rows[6] = {1.0, 0.0, 0.0, 1.0, -1.0, 0.0};
    PfMemory *mem = NULL;
    CHECK(pf_memory_from_rows(rows, 3, 2, &mem));

    double query[2] = {0.1, 0.9};
    size_t index = 99;
    CHECK(pf_memory_retrieve(mem, query, 2, &index));
    if (index != 1) {
        fprintf(stderr, "expected slot 1, got %zu\n", index);
        return 1;
    }

    size_t needed = 0;
    if (pf_memory_serialize(mem, NULL, 0, &needed) != PF_STATUS_BUFFER_TOO_SMALL || needed != pf_wire_size(3, 2)) {
        fprintf(stderr, "size query failed\n");
        return 1;
    }
    unsigned char *buf = malloc(needed);
    size_t written = 0;
    CHECK(pf_memory_serialize(mem, buf, needed, &written));
    PfMemory *back = NULL;
    CHECK(pf_memory_deserialize(buf, written, 3, 2, &back));
    double row[2];
    CHECK(pf_memory_row(back, 2, row, 2));
    if (row[0] != -1.0 || row[1] != 0.0) {
        fprintf(stderr, "row mismatch\n");
        return 1;
    }

    if (pf_memory_retrieve(mem, query, 3, &index) != PF_STATUS_SHAPE_MISMATCH || pf_last_error_message() == NULL) {
        fprintf(stderr, "shape error not reported\n");
        return 1;
    }

    free(buf);
    pf_memory_free(back);
    pf_memory_free(mem);
    pf_memory_free(NULL);
    printf("ok %s\n", pf_version());
    return 0;
}
