#include <stdio.h>
#include <stdlib.h>

typedef int (*op_fn)(int, int);

__attribute__((noinline)) int op_add(int a, int b) { return a + b; }
__attribute__((noinline)) int op_sub(int a, int b) { return a - b; }
__attribute__((noinline)) int op_mul(int a, int b) { return a * b; }
__attribute__((noinline)) int op_max(int a, int b) { return a > b ? a : b; }

static op_fn table[] = {op_add, op_sub, op_mul, op_max};

__attribute__((noinline)) int fold(const int *v, int n, op_fn f) {
    int acc = v[0];
    for (int i = 1; i < n; i++)
        acc = f(acc, v[i]);
    return acc;
}

int main(int argc, char **argv) {
    int v[] = {3, 1, 4, 1, 5, 9, 2, 6};
    int sel = argc > 1 ? atoi(argv[1]) : 0;
    printf("%d\n", fold(v, 8, table[sel & 3]));
    return 0;
}
