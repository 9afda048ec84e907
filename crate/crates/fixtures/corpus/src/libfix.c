__attribute__((noinline)) int lib_grade(int score) {
    switch (score / 10) {
    case 10:
    case 9:
        return 'A';
    case 8:
        return 'B' + (score & 1);
    case 7:
        return 'C' - (score & 1);
    case 6:
        return 'D' + (score % 3);
    case 5:
        return 'E' * (score & 1);
    case 4:
        return score + 1;
    default:
        return 'F';
    }
}

int lib_sum(const int *v, int n) {
    int s = 0;
    for (int i = 0; i < n; i++)
        s += v[i] > 0 ? v[i] : -v[i];
    return s;
}
