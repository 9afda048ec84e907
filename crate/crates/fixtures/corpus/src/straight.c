#include <stdio.h>

static int add(int a, int b) { return a + b; }

static int scale(int v) { return v * 7; }

int main(void) {
    int s = 0;
    s = add(s, 3);
    s = add(s, 4);
    s = scale(s);
    printf("sum=%d\n", s);
    return 0;
}
