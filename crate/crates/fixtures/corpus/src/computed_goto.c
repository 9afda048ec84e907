#include <stdio.h>
#include <string.h>

__attribute__((noinline)) long run(const unsigned char *code, unsigned long n) {
    static void *labels[] = {&&op_inc, &&op_dec, &&op_dbl, &&op_half,
                             &&op_neg, &&op_sq,  &&op_add, &&op_end};
    long acc = 1;
    unsigned long pc = 0;
#define NEXT                                                                   \
    do {                                                                       \
        if (pc >= n)                                                           \
            return acc;                                                        \
        goto *labels[code[pc++] & 7];                                          \
    } while (0)
    NEXT;
op_inc:
    acc++;
    NEXT;
op_dec:
    acc--;
    NEXT;
op_dbl:
    acc *= 2;
    NEXT;
op_half:
    acc /= 2;
    NEXT;
op_neg:
    acc = -acc;
    NEXT;
op_sq:
    acc = acc * acc % 1000003;
    NEXT;
op_add:
    acc += (long)pc;
    NEXT;
op_end:
    return acc + 1000;
}

int main(int argc, char **argv) {
    const char *prog = argc > 1 ? argv[1] : "abcdefgh";
    printf("%ld\n", run((const unsigned char *)prog, strlen(prog)));
    return 0;
}
