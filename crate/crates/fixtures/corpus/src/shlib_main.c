#include <stdio.h>
#include <stdlib.h>

int lib_grade(int score);
int lib_sum(const int *v, int n);

int main(int argc, char **argv) {
    int v[16];
    int n = 0;
    for (int i = 1; i < argc && n < 16; i++)
        v[n++] = atoi(argv[i]);
    for (int i = 0; i < n; i++)
        printf("%d -> %c\n", v[i], lib_grade(v[i]));
    printf("sum %d\n", lib_sum(v, n));
    return 0;
}
