#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) const char *name(int code) {
    switch (code) {
    case 1:
        return "one";
    case 10:
        return "ten";
    case 100:
        return "hundred";
    case 1000:
        return "thousand";
    case 5000:
        return "five thousand";
    case 20000:
        return "twenty thousand";
    default:
        return "other";
    }
}

int main(int argc, char **argv) {
    for (int i = 1; i < argc; i++)
        printf("%s\n", name(atoi(argv[i])));
    return argc - 1;
}
