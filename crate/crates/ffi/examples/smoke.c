/* Minimal C client: merge a probability grid and report the version. */
#include <stdio.h>
#include "docprune.h"

int main(void) {
    const double grid[8] = {0.1, 0.2, 0.0, 0.0, 0.3, 0.4, 0.0, 0.5};
    double merged[2];
    if (dp_merge_max(grid, 2, 4, merged) != DP_STATUS_OK) {
        fprintf(stderr, "%s\n", dp_last_error());
        return 1;
    }
    double odd[3] = {0};
    if (dp_merge_max(odd, 1, 3, merged + 1) != DP_STATUS_CONFIG_ERROR) {
        return 2;
    }
    printf("%s %.1f\n", dp_version(), merged[0]);
    return 0;
}
