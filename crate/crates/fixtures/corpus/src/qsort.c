#include <stdio.h>
#include <stdlib.h>

static int asc(const void *a, const void *b) {
    int x = *(const int *)a, y = *(const int *)b;
    return (x > y) - (x < y);
}

static int desc(const void *a, const void *b) { return asc(b, a); }

int main(int argc, char **argv) {
    int v[64];
    int n = argc - 1 < 64 ? argc - 1 : 64;
    for (int i = 0; i < n; i++)
        v[i] = atoi(argv[i + 1]);
    qsort(v, (size_t)n, sizeof v[0], n % 2 ? asc : desc);
    for (int i = 0; i < n; i++)
        printf("%d%c", v[i], i + 1 == n ? '\n' : ' ');
    int key = 5;
    if (n % 2 && bsearch(&key, v, (size_t)n, sizeof v[0], asc))
        puts("has 5");
    return 0;
}
